"""Universality measurement and downstream probes.

The sigma score sums, over a suite of tasks and their samples, the KL
divergence from an oracle labeler's one-hot distribution to the model's
class distribution; with one-hot oracles it equals the summed negative
log-probability of the true class, so lower is better. Also here: the
one-step-adaptation performance ratio of two models, a frozen-feature
linear probe, and a leave-one-out cosine k-NN evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .models import ParameterSet, PiKind, make_pi, encode
from .taskgen import Dataset, StreamKey, TaskBatch, make_task
from .trainer import GesslConfig, inner_adapt

PROBABILITY_FLOOR = 1e-12


class SigmaError(Exception):
    pass


class OracleCoverageError(SigmaError):
    """The oracle has no label for some sample of some task."""


@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.5
    l2: float = 1e-4
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise SigmaError(f"epochs must be >= 1, got {self.epochs}")
        if self.k < 1:
            raise SigmaError(f"k must be >= 1, got {self.k}")


class OracleLabeler:
    """Per-task sample labels, emitted as exact one-hot distributions."""

    def __init__(self, per_task_labels: Sequence[Sequence[int]]):
        self._labels = [list(int(x) for x in task) for task in per_task_labels]

    @classmethod
    def from_tasks(cls, suite: Sequence[TaskBatch]) -> "OracleLabeler":
        """Oracle = the tasks' own pseudo-labels."""
        return cls([task.pseudo_labels for task in suite])

    @classmethod
    def from_true_labels(cls, suite: Sequence[TaskBatch], dataset: Dataset) -> "OracleLabeler":
        """Oracle = the dataset's true class of each view's source row."""
        if dataset.true_labels is None:
            raise SigmaError("dataset carries no true labels")
        per_task = []
        for task in suite:
            labels = [dataset.true_labels[task.source_indices[i]]
                      for i in task.pseudo_labels]
            per_task.append(labels)
        return cls(per_task)

    def label(self, task_index: int, sample_index: int) -> int:
        try:
            return self._labels[task_index][sample_index]
        except IndexError as exc:
            raise OracleCoverageError(
                f"oracle has no label for task {task_index}, sample {sample_index}") from exc

    def one_hot(self, task_index: int, n_samples: int, n_classes: int) -> np.ndarray:
        rows = np.zeros((n_samples, n_classes))
        for s in range(n_samples):
            label = self.label(task_index, s)
            if not 0 <= label < n_classes:
                raise SigmaError(
                    f"oracle label {label} outside 0..{n_classes - 1} for task {task_index}")
            rows[s, label] = 1.0
        return rows


@dataclass
class SigmaReport:
    per_task_sigma: list[float]
    total: float
    per_sample_mean: float
    tasks: int
    samples: int


def kl_divergence(p, q) -> float:
    """sum_i p_i ln(p_i / max(q_i, 1e-12)), with 0 ln 0 = 0. Natural log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise SigmaError(f"distributions must be 1-D and length-matched, got {p.shape}, {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0):
            raise SigmaError(f"{name} has negative entries")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise SigmaError(f"{name} sums to {dist.sum()!r}, not 1")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], PROBABILITY_FLOOR))))


def sigma_from_distributions(per_task_distributions: Sequence[np.ndarray],
                             oracle: OracleLabeler) -> SigmaReport:
    """Score precomputed per-task distribution matrices against the oracle."""
    per_task = []
    samples = 0
    for t, dist in enumerate(per_task_distributions):
        dist = np.asarray(dist, dtype=np.float64)
        truth = oracle.one_hot(t, dist.shape[0], dist.shape[1])
        sigma = sum(kl_divergence(truth[s], dist[s]) for s in range(dist.shape[0]))
        per_task.append(float(sigma))
        samples += dist.shape[0]
    total = float(sum(per_task))
    return SigmaReport(
        per_task_sigma=per_task,
        total=total,
        per_sample_mean=total / samples if samples else 0.0,
        tasks=len(per_task),
        samples=samples,
    )


def model_task_distributions(params: ParameterSet, pi: PiKind, suite: Sequence[TaskBatch],
                             embed_dim: int) -> list[np.ndarray]:
    """The model's class distributions for every task in the suite."""
    out = []
    for index, task in enumerate(suite):
        pi_fn = make_pi(pi, embed_dim, task.n_classes, (index,))
        emb = encode(params, task.views.data)
        out.append(pi_fn(emb, task.pseudo_labels).data.copy())
    return out


def sigma_measure(params: ParameterSet, pi: PiKind, suite: Sequence[TaskBatch],
                  oracle: OracleLabeler, *, embed_dim: int | None = None) -> SigmaReport:
    """Sigma score of a model over a task suite against an oracle labeler."""
    if embed_dim is None:
        embed_dim = params["proj.w"].shape[0]
    dists = model_task_distributions(params, pi, suite, embed_dim)
    return sigma_from_distributions(dists, oracle)


def mean_true_class_log_prob(per_task_distributions: Sequence[np.ndarray],
                             oracle: OracleLabeler) -> float:
    """Mean ln p(true class); with one-hot oracles, sigma = -samples * this."""
    logs = []
    for t, dist in enumerate(per_task_distributions):
        dist = np.asarray(dist, dtype=np.float64)
        for s in range(dist.shape[0]):
            p_true = max(dist[s, oracle.label(t, s)], PROBABILITY_FLOOR)
            logs.append(np.log(p_true))
    return float(np.mean(logs))


# -- one-step-adaptation performance ratio ---------------------------------

def performance_ratio(acc_a: float, acc_b: float) -> float:
    if acc_b == 0:
        raise SigmaError("reference accuracy is zero; the ratio is undefined")
    return acc_a / acc_b


def _one_step_task_accuracy(params: ParameterSet, task: TaskBatch, cfg: GesslConfig,
                            task_index: int) -> float:
    adapted = inner_adapt(params, task, 1, cfg.inner_lr, cfg.loss)
    pi_fn = make_pi(cfg.pi, cfg.encoder.embed_dim, task.n_classes, (task_index,))
    dist = pi_fn(encode(adapted, task.views.data), task.pseudo_labels).data
    predicted = dist.argmax(axis=1)
    return float(np.mean(predicted == np.asarray(task.pseudo_labels)))


def universality_ratio(params_a: ParameterSet, params_b: ParameterSet, dataset: Dataset,
                       cfg: GesslConfig, *, tasks: int = 32, seed: int = 0) -> float:
    """accuracy_A / accuracy_B after exactly one adaptation step per task.

    Task accuracy is the head's argmax agreement with the pseudo-labels,
    averaged over a seeded suite drawn from the dataset.
    """
    if tasks < 1:
        raise SigmaError(f"need at least one task, got {tasks}")
    acc_a = acc_b = 0.0
    for j in range(tasks):
        task = make_task(dataset, cfg.batch_classes, cfg.views_per_class,
                         cfg.augmentation, StreamKey(seed, 0, j))
        acc_a += _one_step_task_accuracy(params_a, task, cfg, j)
        acc_b += _one_step_task_accuracy(params_b, task, cfg, j)
    return performance_ratio(acc_a / tasks, acc_b / tasks)


# -- probes -----------------------------------------------------------------

def _content_keyed_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """A sample order that depends only on content, not input order."""
    keys = tuple(features[:, j] for j in range(features.shape[1] - 1, -1, -1))
    return np.lexsort((labels,) + keys)


def linear_probe(features, labels, probe: ProbeConfig) -> float:
    """Softmax regression on frozen features; held-out accuracy.

    Full-batch gradient descent for ``epochs`` with learning rate ``lr``
    and l2 penalty on the weights. The 80/20 split is keyed by
    ``probe.seed`` but derived from a content-sorted order, so it is
    invariant to permutations of the input rows.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise SigmaError(f"bad probe inputs: features {x.shape}, labels {y.shape}")
    classes = int(y.max()) + 1
    if np.unique(y).size < 2:
        raise SigmaError("linear probe needs at least two classes")

    order = _content_keyed_order(x, y)
    held = order[probe.seed % 5::5]
    train_idx = np.setdiff1d(order, held)
    x_tr, y_tr = x[train_idx], y[train_idx]
    x_te, y_te = x[held], y[held]

    onehot = np.zeros((y_tr.size, classes))
    onehot[np.arange(y_tr.size), y_tr] = 1.0
    w = np.zeros((x.shape[1], classes))
    b = np.zeros(classes)
    for _ in range(probe.epochs):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / y_tr.size
        w -= probe.lr * (x_tr.T @ err + probe.l2 * w)
        b -= probe.lr * err.sum(axis=0)
    predictions = (x_te @ w + b).argmax(axis=1)
    return float(np.mean(predictions == y_te))


def knn_eval(features, labels, k: int = 5) -> float:
    """Leave-one-out cosine k-NN accuracy; vote ties go to the smallest
    class id, similarity ties to the smallest sample index."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n <= k:
        raise SigmaError(f"need more than k={k} samples, got {n}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.where(norms < 1e-12, x, x / np.where(norms < 1e-12, 1.0, norms))
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    correct = 0
    for i in range(n):
        neighbors = np.argsort(-sims[i], kind="stable")[:k]
        votes = np.bincount(y[neighbors])
        correct += int(votes.argmax() == y[i])
    return correct / n
