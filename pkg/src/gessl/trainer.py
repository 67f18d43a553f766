"""The three-step bi-level SSL trainer.

Per task: (1) adapt the shared model with a few plain SGD steps on the
SSL loss; (2) continue for extra steps to obtain the self-motivated
target and freeze its class distributions; (3) distill the adapted model
toward that fixed target and push the resulting hypergradient back into
the shared initialization, summed over the episode's tasks.

Because the shared parameters enter each task only as the inner-loop
initialization, the strategies map onto this structure as follows: ITD
reverse-sweeps the recorded inner trajectory with finite-difference
Hessian products; the finite-difference strategy uses the classic
one-shot curvature correction v - K*lr * H v; Neumann and CG solve the
proximal system (I + K*lr*H) w = v whose solution matches the unrolled
derivative to second order in the inner learning rate (the Neumann eta
is implied by that operator and ignored here). Lookahead is a Polyak
slow/fast-weight baseline driven by the first-order outer gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .hypergrad import (
    AidCg,
    AidFd,
    AidNeumann,
    HypergradKind,
    ItdUnrolled,
    LookaheadKind,
    cg_solve,
    hvp,
    lookahead_update,
    neumann_series,
)
from .losses import AlignCosine, ContrastiveNtXent, LossKind, RedundancyBarlow, align_cosine, barlow, nt_xent
from .models import (
    BoundParams,
    EncoderConfig,
    OptimState,
    ParameterSet,
    PiFn,
    PiKind,
    PrototypePi,
    Snapshot,
    clone_snapshot,
    encode,
    init_encoder,
    make_pi,
    project,
    sgd_step,
)
from .taskgen import AugmentationSpec, Dataset, StreamKey, TaskBatch, make_episode
from .tensor import DiffRecord, Tensor, as_tensor, backward

DISTILL_KINDS = ("kl", "mse", "cross_entropy")

DISTRIBUTION_FLOOR = 1e-12  # probabilities are clamped here before logs


class GesslError(Exception):
    pass


@dataclass(frozen=True)
class GesslConfig:
    """All scalars of the method, with desk-scale defaults.

    Defaults: one inner step, ten extra target steps, eight tasks per
    outer update, sixteen pseudo-classes of two views each, KL
    distillation, and the finite-difference hypergradient strategy.
    """
    encoder: EncoderConfig
    inner_steps: int = 1
    target_extra_steps: int = 10
    tasks_per_update: int = 8
    inner_lr: float = 1e-2
    outer_lr: float = 1e-2
    loss: LossKind = ContrastiveNtXent(tau=0.1)
    pi: PiKind = PrototypePi(tau=0.1)
    hypergrad: HypergradKind = AidFd(epsilon_rel=1e-3)
    distill: str = "kl"
    outer_momentum: float = 0.9
    outer_weight_decay: float = 1e-4
    batch_classes: int = 16
    views_per_class: int = 2
    episodes: int = 50
    master_seed: int = 0
    augmentation: AugmentationSpec = AugmentationSpec()

    def __post_init__(self):
        if self.inner_steps < 0:
            raise GesslError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.target_extra_steps < 1:
            raise GesslError(f"target_extra_steps must be >= 1, got {self.target_extra_steps}")
        if self.tasks_per_update < 1:
            raise GesslError(f"tasks_per_update must be >= 1, got {self.tasks_per_update}")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise GesslError("learning rates must be >= 0")
        if self.distill not in DISTILL_KINDS:
            raise GesslError(f"distill must be one of {DISTILL_KINDS}, got {self.distill!r}")
        if self.batch_classes < 2:
            raise GesslError(f"batch_classes must be >= 2, got {self.batch_classes}")
        if self.views_per_class < 2:
            raise GesslError(f"views_per_class must be >= 2, got {self.views_per_class}")
        if self.episodes < 0 or self.master_seed < 0:
            raise GesslError("episodes and master_seed must be >= 0")


@dataclass
class TaskAdaptResult:
    """Everything step 2 produces for one task."""
    snapshot_adapted: Snapshot
    snapshot_target: Snapshot
    target_distributions: Tensor
    inner_loss_trace: list[float]


@dataclass
class StepMetrics:
    episode: int
    inner_loss_mean: float
    distill_total: float
    outer_grad_norm: float


# -- losses over a whole task ---------------------------------------------

def _constant_params(params_map: Mapping[str, Tensor]):
    if isinstance(params_map, BoundParams):
        return params_map.detached()
    return params_map


def ssl_task_loss(loss_kind, params_map: Mapping[str, Tensor], task: TaskBatch) -> Tensor:
    """The inner objective for one task. Accepts the three built-in loss
    kinds or any callable ``(params_map, task) -> scalar Tensor``.

    The pairwise kinds use the first two views of each class.
    """
    if isinstance(loss_kind, ContrastiveNtXent):
        if task.views_per_class != 2:
            raise GesslError("the contrastive loss needs exactly two views per class")
        emb = encode(params_map, task.views.data)
        return nt_xent(project(params_map, emb), task.pseudo_labels, loss_kind.tau)
    if isinstance(loss_kind, RedundancyBarlow):
        z_a = project(params_map, encode(params_map, task.view_rows(0)))
        z_b = project(params_map, encode(params_map, task.view_rows(1)))
        return barlow(z_a, z_b, loss_kind.lambda_offdiag)
    if isinstance(loss_kind, AlignCosine):
        z_a = project(params_map, encode(params_map, task.view_rows(0)))
        frozen = _constant_params(params_map)
        z_b = project(frozen, encode(frozen, task.view_rows(1)))
        return align_cosine(z_a, z_b)
    if callable(loss_kind):
        return loss_kind(params_map, task)
    raise GesslError(f"unknown loss kind: {loss_kind!r}")


def _ssl_loss_and_grad(params: ParameterSet, task, loss_kind) -> tuple[float, dict[str, np.ndarray]]:
    record = DiffRecord()
    bound = params.bind(record)
    loss = ssl_task_loss(loss_kind, bound, task)
    grads = bound.gradients(backward(record, loss))
    return loss.item(), grads


def _flatten(params: ParameterSet, grads: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[name]).ravel() for name in params.names()])


def _ssl_grad_flat(template: ParameterSet, flat: np.ndarray, task, loss_kind) -> np.ndarray:
    pset = template.from_vector(flat)
    _, grads = _ssl_loss_and_grad(pset, task, loss_kind)
    return _flatten(pset, grads)


# -- the three steps --------------------------------------------------------

def _adapt_with_trace(params: ParameterSet, task, steps: int, lr: float,
                      loss_kind) -> tuple[ParameterSet, list[float], list[ParameterSet]]:
    current = params.clone()
    trace: list[float] = []
    trajectory = [current]
    for _ in range(steps):
        value, grads = _ssl_loss_and_grad(current, task, loss_kind)
        trace.append(value)
        current = ParameterSet(
            (name, current[name].data - lr * grads[name]) for name in current.names())
        trajectory.append(current)
    return current, trace, trajectory


def inner_adapt(params: ParameterSet, task: TaskBatch, steps: int, lr: float,
                loss_kind) -> ParameterSet:
    """Apply ``steps`` plain SGD steps on the task's SSL loss.

    steps=0 returns a deep copy of the input.
    """
    if steps < 0:
        raise GesslError(f"steps must be >= 0, got {steps}")
    adapted, _, _ = _adapt_with_trace(params, task, steps, lr, loss_kind)
    return adapted


def build_target(params_adapted: ParameterSet, task: TaskBatch, extra_steps: int,
                 lr: float, loss_kind, pi_fn: PiFn,
                 preceding_trace: Sequence[float] = ()) -> TaskAdaptResult:
    """Continue adapting for ``extra_steps`` and freeze the resulting
    class distributions as the distillation target."""
    if extra_steps < 1:
        raise GesslError(f"extra_steps must be >= 1, got {extra_steps}")
    final, trace, _ = _adapt_with_trace(params_adapted, task, extra_steps, lr, loss_kind)
    emb = encode(final, task.views.data)
    target = pi_fn(emb, task.pseudo_labels)
    sums = target.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-12):
        raise GesslError("target distributions do not sum to 1")
    return TaskAdaptResult(
        snapshot_adapted=clone_snapshot(params_adapted, "adapted"),
        snapshot_target=clone_snapshot(final, "target"),
        target_distributions=target.detached(),
        inner_loss_trace=list(preceding_trace) + trace,
    )


def _validate_distributions(rows: np.ndarray, what: str) -> None:
    if rows.ndim != 2:
        raise GesslError(f"{what} must be 2-D, got shape {rows.shape}")
    if np.any(rows < 0):
        raise GesslError(f"{what} contain negative entries")
    if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
        raise GesslError(f"{what} rows must sum to 1")


def distill_loss(params_map: Mapping[str, Tensor], task: TaskBatch, target_distributions,
                 pi_fn: PiFn, kind: str) -> Tensor:
    """Distillation loss of the current distributions against a fixed target.

    kl: sum_x KL(target_x || current_x); cross_entropy: sum_x of the
    cross term only; mse: mean squared difference over all entries.
    Differentiable in the current parameters only; the target is a
    constant. Probabilities are clamped at 1e-12 before logs.
    """
    if kind not in DISTILL_KINDS:
        raise GesslError(f"distill kind must be one of {DISTILL_KINDS}, got {kind!r}")
    target = np.asarray(
        target_distributions.data if isinstance(target_distributions, Tensor)
        else target_distributions, dtype=np.float64)
    _validate_distributions(target, "target distributions")

    emb = encode(params_map, task.views.data)
    current = pi_fn(emb, task.pseudo_labels)
    if current.shape != target.shape:
        raise GesslError(
            f"target shape {target.shape} does not match current {current.shape}")

    if kind == "mse":
        diff = current - as_tensor(target)
        return (diff * diff).mean()

    cross = -(as_tensor(target) * current.log(floor=DISTRIBUTION_FLOOR)).sum()
    if kind == "cross_entropy":
        return cross
    entropy = -float(np.sum(target * np.log(np.maximum(target, DISTRIBUTION_FLOOR))))
    return cross - entropy


def _distill_value_and_grad(params: ParameterSet, task, target, pi_fn,
                            kind: str) -> tuple[float, np.ndarray]:
    record = DiffRecord()
    bound = params.bind(record)
    loss = distill_loss(bound, task, target, pi_fn, kind)
    grads = bound.gradients(backward(record, loss))
    return loss.item(), _flatten(params, grads)


# -- per-task hypergradient -------------------------------------------------

def _task_hypergradient(theta: ParameterSet, task: TaskBatch, cfg: GesslConfig,
                        strategy: HypergradKind, pi_fn: PiFn) -> tuple[np.ndarray, TaskAdaptResult, float]:
    adapted, k_trace, trajectory = _adapt_with_trace(
        theta, task, cfg.inner_steps, cfg.inner_lr, cfg.loss)
    result = build_target(adapted, task, cfg.target_extra_steps, cfg.inner_lr,
                          cfg.loss, pi_fn, preceding_trace=k_trace)
    value, v = _distill_value_and_grad(adapted, task, result.target_distributions,
                                       pi_fn, cfg.distill)

    scale = cfg.inner_steps * cfg.inner_lr
    ssl_grad = lambda flat: _ssl_grad_flat(theta, flat, task, cfg.loss)

    if cfg.inner_steps == 0 or isinstance(strategy, LookaheadKind):
        grad = v
    elif isinstance(strategy, ItdUnrolled):
        p = v
        for t in range(cfg.inner_steps - 1, -1, -1):
            phi_t = trajectory[t].to_vector()
            p = p - cfg.inner_lr * hvp(ssl_grad, phi_t, p)
        grad = p
    elif isinstance(strategy, AidFd):
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            grad = v
        else:
            phi = adapted.to_vector()
            eps = strategy.epsilon_rel / (1.0 + norm)
            curvature = (ssl_grad(phi + eps * v) - ssl_grad(phi - eps * v)) / (2.0 * eps)
            grad = v - scale * curvature
    elif isinstance(strategy, AidNeumann):
        phi = adapted.to_vector()
        contraction = lambda w: -scale * hvp(ssl_grad, phi, w)
        grad = neumann_series(contraction, v, strategy.terms)
    elif isinstance(strategy, AidCg):
        phi = adapted.to_vector()
        operator = lambda w: w + scale * hvp(ssl_grad, phi, w)
        grad, _ = cg_solve(operator, v, strategy.iters, strategy.tol)
    else:
        raise GesslError(f"unknown hypergradient strategy: {strategy!r}")

    return grad, result, value


def nominal_inner_grad_evals_per_task(cfg: GesslConfig) -> int:
    """SSL-loss gradient evaluations one task costs, as configured.

    Counts the adaptation and target phases plus the strategy's own
    curvature probes (CG counted at its configured iteration cap).
    """
    base = cfg.inner_steps + cfg.target_extra_steps
    if cfg.inner_steps == 0:
        return base
    s = cfg.hypergrad
    if isinstance(s, AidFd):
        return base + 2
    if isinstance(s, ItdUnrolled):
        return base + 2 * cfg.inner_steps
    if isinstance(s, AidNeumann):
        return base + 2 * (s.terms - 1)
    if isinstance(s, AidCg):
        return base + 2 * s.iters
    return base  # lookahead: first-order only


# -- outer loop --------------------------------------------------------------

def outer_step(params: ParameterSet, tasks: Sequence[TaskBatch], cfg: GesslConfig,
               strategy: HypergradKind | None = None, *,
               opt_state: OptimState | None = None,
               episode: int = 0) -> tuple[ParameterSet, StepMetrics]:
    """One outer update over an episode's tasks, accumulated in task order."""
    if not tasks:
        raise GesslError("outer_step needs at least one task")
    strategy = cfg.hypergrad if strategy is None else strategy
    if opt_state is None:
        opt_state = OptimState(cfg.outer_momentum, cfg.outer_weight_decay)

    total = np.zeros(params.to_vector().size)
    inner_means: list[float] = []
    distill_total = 0.0
    for index, task in enumerate(tasks):
        pi_fn = make_pi(cfg.pi, cfg.encoder.embed_dim, task.n_classes, (episode, index))
        grad, result, value = _task_hypergradient(params, task, cfg, strategy, pi_fn)
        total = total + grad
        distill_total += value
        if result.inner_loss_trace:
            inner_means.append(float(np.mean(result.inner_loss_trace)))

    grad_set = params.from_vector(total)
    new_params = sgd_step(params, dict(grad_set.items()), cfg.outer_lr, opt_state)
    metrics = StepMetrics(
        episode=episode,
        inner_loss_mean=float(np.mean(inner_means)) if inner_means else 0.0,
        distill_total=distill_total,
        outer_grad_norm=float(np.linalg.norm(total)),
    )
    return new_params, metrics


def episode_objective(params: ParameterSet, tasks: Sequence[TaskBatch], cfg: GesslConfig,
                      episode: int = 0) -> float:
    """The outer objective at ``params``: sum over tasks of the distill
    loss after re-running adaptation and target construction."""
    total = 0.0
    for index, task in enumerate(tasks):
        pi_fn = make_pi(cfg.pi, cfg.encoder.embed_dim, task.n_classes, (episode, index))
        adapted, k_trace, _ = _adapt_with_trace(params, task, cfg.inner_steps,
                                                cfg.inner_lr, cfg.loss)
        result = build_target(adapted, task, cfg.target_extra_steps, cfg.inner_lr,
                              cfg.loss, pi_fn, preceding_trace=k_trace)
        loss = distill_loss(adapted, task, result.target_distributions, pi_fn, cfg.distill)
        total += loss.item()
    return total


def train(dataset: Dataset, cfg: GesslConfig,
          step_hook: Callable[[int, ParameterSet, StepMetrics], None] | None = None,
          ) -> tuple[ParameterSet, list[StepMetrics]]:
    """Run the full loop: one episode of tasks per outer update.

    Fully deterministic given (dataset, cfg); emits one StepMetrics per
    outer step.
    """
    if dataset.dim != cfg.encoder.input_dim:
        raise GesslError(
            f"dataset dim {dataset.dim} != encoder input_dim {cfg.encoder.input_dim}")
    params = init_encoder(cfg.encoder, cfg.master_seed)
    opt_state = OptimState(cfg.outer_momentum, cfg.outer_weight_decay)
    lookahead = cfg.hypergrad if isinstance(cfg.hypergrad, LookaheadKind) else None
    slow = params.clone() if lookahead else None

    history: list[StepMetrics] = []
    for episode in range(cfg.episodes):
        tasks = make_episode(dataset, cfg.tasks_per_update, cfg.batch_classes,
                             cfg.views_per_class, cfg.augmentation,
                             StreamKey(cfg.master_seed, episode))
        params, metrics = outer_step(params, tasks, cfg, opt_state=opt_state,
                                     episode=episode)
        if lookahead and (episode + 1) % lookahead.sync_period == 0:
            slow = lookahead_update(slow, params, lookahead.alpha_la)
            params = slow.clone()
        history.append(metrics)
        if step_hook is not None:
            step_hook(episode, params, metrics)
    return params, history


@dataclass
class TheoremRow:
    inner_lr: float
    outer_lr: float
    fraction_nonincreasing: float
    mean_delta: float


def theorem_check(dataset: Dataset, base_cfg: GesslConfig,
                  lr_grid: Sequence[tuple[float, float]], *,
                  steps: int = 50, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[TheoremRow]:
    """Empirical small-learning-rate monotonicity of the outer objective.

    For each (inner_lr, outer_lr) pair: run ``steps`` outer updates per
    seed with a plain outer step (no momentum, no weight decay), and
    measure the objective on each step's own episode before and after
    the update. Reports the fraction of non-increasing steps and the
    mean change.
    """
    rows = []
    for inner_lr, outer_lr in lr_grid:
        deltas: list[float] = []
        for seed in seeds:
            cfg = replace(base_cfg, inner_lr=float(inner_lr), outer_lr=float(outer_lr),
                          episodes=steps, master_seed=int(seed),
                          outer_momentum=0.0, outer_weight_decay=0.0)
            params = init_encoder(cfg.encoder, cfg.master_seed)
            opt_state = OptimState(0.0, 0.0)
            for episode in range(steps):
                tasks = make_episode(dataset, cfg.tasks_per_update, cfg.batch_classes,
                                     cfg.views_per_class, cfg.augmentation,
                                     StreamKey(cfg.master_seed, episode))
                new_params, metrics = outer_step(params, tasks, cfg,
                                                 opt_state=opt_state, episode=episode)
                after = episode_objective(new_params, tasks, cfg, episode)
                deltas.append(after - metrics.distill_total)
                params = new_params
        arr = np.asarray(deltas)
        rows.append(TheoremRow(
            inner_lr=float(inner_lr),
            outer_lr=float(outer_lr),
            fraction_nonincreasing=float(np.mean(arr <= 1e-12)),
            mean_delta=float(arr.mean()),
        ))
    return rows
