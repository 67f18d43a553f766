"""Runnable experiment surface: config files, runs, persistence, metrics.

A run is driven by a flat ``key=value`` config file (``#`` starts a
comment). Artifacts land in one directory per run: a resolved config
snapshot, a JSONL metrics stream, a binary checkpoint, and an evaluation
summary. The baseline mode trains plain per-batch SSL under the same
total budget of SSL-loss gradient evaluations as the bi-level mode, and
consumes the same task streams for the same (seed, episode, task) keys.

Checkpoint format (little-endian): magic ``GSSL``, version u32=1,
param_count u64; per parameter: name_len u16, name bytes, rank u8,
dims u64*rank, float64 data.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .hypergrad import AidCg, AidFd, AidNeumann, ItdUnrolled, LookaheadKind
from .losses import AlignCosine, ContrastiveNtXent, RedundancyBarlow
from .models import EncoderConfig, LinearPi, OptimState, ParameterSet, PrototypePi, encode, init_encoder, sgd_step
from .sigma import OracleLabeler, ProbeConfig, knn_eval, linear_probe, sigma_measure
from .taskgen import (
    AugmentationSpec,
    Dataset,
    StreamKey,
    generate_synthetic,
    load_cifar10_batch,
    load_raw_dataset,
    make_task,
    SyntheticSpec,
)
from .trainer import (
    GesslConfig,
    StepMetrics,
    _ssl_loss_and_grad,
    nominal_inner_grad_evals_per_task,
    train,
)

CHECKPOINT_MAGIC = b"GSSL"
CHECKPOINT_VERSION = 1

RUN_MODES = ("gessl", "baseline_ssl")


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    pass


class CheckpointError(HarnessError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class MetricsFormatError(HarnessError):
    pass


@dataclass
class MetricsRecord:
    step: int
    episode: int
    inner_loss_mean: float
    distill_loss: float
    outer_grad_norm: float
    probe_acc: float | None
    sigma_mean: float | None
    seed: int
    wall_ms: float


@dataclass
class ExperimentConfig:
    gessl: GesslConfig
    probe: ProbeConfig
    mode: str = "gessl"
    out_dir: str = "runs/run"
    eval_every: int = 0  # 0 = final evaluation only
    sigma_tasks: int = 16
    comparison_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_path: str | None = None
    cifar_path: str | None = None
    cifar_limit: int = 1000
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    synthetic_seed: int | None = None  # defaults to master_seed

    def load_dataset(self) -> Dataset:
        if self.data_path is not None:
            return load_raw_dataset(self.data_path)
        if self.cifar_path is not None:
            return load_cifar10_batch(self.cifar_path, limit=self.cifar_limit)
        seed = self.gessl.master_seed if self.synthetic_seed is None else self.synthetic_seed
        return generate_synthetic(self.synthetic, seed)


# -- config files ------------------------------------------------------------

_CONFIG_DEFAULTS: dict[str, str] = {
    "mode": "gessl",
    "out_dir": "runs/run",
    "episodes": "50",
    "tasks_per_update": "8",
    "batch_classes": "16",
    "views_per_class": "2",
    "inner_steps": "1",
    "target_extra_steps": "10",
    "inner_lr": "0.01",
    "outer_lr": "0.01",
    "loss": "nt_xent",
    "loss_tau": "0.1",
    "barlow_offdiag": "0.005",
    "pi": "prototype",
    "pi_tau": "0.1",
    "pi_seed": "0",
    "hypergrad": "aid_fd",
    "fd_epsilon_rel": "0.001",
    "neumann_terms": "50",
    "neumann_eta": "0.5",
    "cg_iters": "20",
    "cg_tol": "1e-8",
    "lookahead_alpha": "0.5",
    "lookahead_sync": "5",
    "distill": "kl",
    "outer_momentum": "0.9",
    "outer_weight_decay": "0.0001",
    "hidden_dims": "64,64",
    "embed_dim": "32",
    "proj_dim": "16",
    "aug_noise_sigma": "0.05",
    "aug_dropout_p": "0.1",
    "aug_scale_lo": "0.9",
    "aug_scale_hi": "1.1",
    "data": "",
    "cifar": "",
    "cifar_limit": "1000",
    "synthetic_classes": "8",
    "synthetic_per_class": "100",
    "synthetic_dim": "16",
    "synthetic_center_scale": "3.0",
    "synthetic_within_sigma": "1.0",
    "synthetic_seed": "",
    "probe_epochs": "200",
    "probe_lr": "0.5",
    "probe_l2": "0.0001",
    "probe_k": "5",
    "probe_seed": "0",
    "eval_every": "0",
    "sigma_tasks": "16",
    "comparison_seeds": "0,1,2,3,4",
}

CONFIG_KEYS = ("master_seed",) + tuple(_CONFIG_DEFAULTS)


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines into a dict; unknown or malformed keys fail loudly."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = value
    if "master_seed" not in values:
        raise ConfigError("missing required config key 'master_seed'")
    return values


def _as_int(values, key):
    try:
        return int(values[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {values[key]!r}") from exc


def _as_float(values, key):
    try:
        return float(values[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {values[key]!r}") from exc


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def build_experiment_config(values: Mapping[str, str], input_dim: int | None = None,
                            ) -> ExperimentConfig:
    """Typed config from parsed key/value strings.

    ``input_dim`` overrides the encoder width when the dataset is known;
    otherwise the synthetic dim (or CIFAR's 3072) is used.
    """
    merged = dict(_CONFIG_DEFAULTS)
    merged.update(values)

    mode = merged["mode"]
    if mode not in RUN_MODES:
        raise ConfigError(f"mode must be one of {RUN_MODES}, got {mode!r}")

    loss_name = merged["loss"]
    if loss_name == "nt_xent":
        loss = ContrastiveNtXent(tau=_as_float(merged, "loss_tau"))
    elif loss_name == "barlow":
        loss = RedundancyBarlow(lambda_offdiag=_as_float(merged, "barlow_offdiag"))
    elif loss_name == "align":
        loss = AlignCosine()
    else:
        raise ConfigError(f"loss must be nt_xent, barlow, or align, got {loss_name!r}")

    pi_name = merged["pi"]
    if pi_name == "prototype":
        pi = PrototypePi(tau=_as_float(merged, "pi_tau"))
    elif pi_name == "linear":
        pi = LinearPi(seed=_as_int(merged, "pi_seed"))
    else:
        raise ConfigError(f"pi must be prototype or linear, got {pi_name!r}")

    hg_name = merged["hypergrad"]
    if hg_name == "aid_fd":
        hypergrad = AidFd(epsilon_rel=_as_float(merged, "fd_epsilon_rel"))
    elif hg_name == "itd":
        hypergrad = ItdUnrolled()
    elif hg_name == "aid_neumann":
        hypergrad = AidNeumann(terms=_as_int(merged, "neumann_terms"),
                               eta=_as_float(merged, "neumann_eta"))
    elif hg_name == "aid_cg":
        hypergrad = AidCg(iters=_as_int(merged, "cg_iters"), tol=_as_float(merged, "cg_tol"))
    elif hg_name == "lookahead":
        hypergrad = LookaheadKind(alpha_la=_as_float(merged, "lookahead_alpha"),
                                  sync_period=_as_int(merged, "lookahead_sync"))
    else:
        raise ConfigError(f"unknown hypergrad strategy {hg_name!r}")

    synthetic = SyntheticSpec(
        classes=_as_int(merged, "synthetic_classes"),
        per_class=_as_int(merged, "synthetic_per_class"),
        dim=_as_int(merged, "synthetic_dim"),
        center_scale=_as_float(merged, "synthetic_center_scale"),
        within_sigma=_as_float(merged, "synthetic_within_sigma"),
    )

    data_path = merged["data"] or None
    cifar_path = merged["cifar"] or None
    if data_path and cifar_path:
        raise ConfigError("set only one of 'data' and 'cifar'")
    if input_dim is None:
        input_dim = 3072 if cifar_path else synthetic.dim

    encoder = EncoderConfig(
        input_dim=input_dim,
        hidden_dims=_int_list(merged["hidden_dims"]),
        embed_dim=_as_int(merged, "embed_dim"),
        proj_dim=_as_int(merged, "proj_dim"),
    )
    augmentation = AugmentationSpec(
        noise_sigma=_as_float(merged, "aug_noise_sigma"),
        dropout_p=_as_float(merged, "aug_dropout_p"),
        scale_range=(_as_float(merged, "aug_scale_lo"), _as_float(merged, "aug_scale_hi")),
    )
    gessl = GesslConfig(
        encoder=encoder,
        inner_steps=_as_int(merged, "inner_steps"),
        target_extra_steps=_as_int(merged, "target_extra_steps"),
        tasks_per_update=_as_int(merged, "tasks_per_update"),
        inner_lr=_as_float(merged, "inner_lr"),
        outer_lr=_as_float(merged, "outer_lr"),
        loss=loss,
        pi=pi,
        hypergrad=hypergrad,
        distill=merged["distill"],
        outer_momentum=_as_float(merged, "outer_momentum"),
        outer_weight_decay=_as_float(merged, "outer_weight_decay"),
        batch_classes=_as_int(merged, "batch_classes"),
        views_per_class=_as_int(merged, "views_per_class"),
        episodes=_as_int(merged, "episodes"),
        master_seed=_as_int(merged, "master_seed"),
        augmentation=augmentation,
    )
    probe = ProbeConfig(
        epochs=_as_int(merged, "probe_epochs"),
        lr=_as_float(merged, "probe_lr"),
        l2=_as_float(merged, "probe_l2"),
        k=_as_int(merged, "probe_k"),
        seed=_as_int(merged, "probe_seed"),
    )
    return ExperimentConfig(
        gessl=gessl,
        probe=probe,
        mode=mode,
        out_dir=merged["out_dir"],
        eval_every=_as_int(merged, "eval_every"),
        sigma_tasks=_as_int(merged, "sigma_tasks"),
        comparison_seeds=_int_list(merged["comparison_seeds"]),
        data_path=data_path,
        cifar_path=cifar_path,
        cifar_limit=_as_int(merged, "cifar_limit"),
        synthetic=synthetic,
        synthetic_seed=_as_int(merged, "synthetic_seed") if merged["synthetic_seed"] else None,
    )


def load_experiment_config(path) -> ExperimentConfig:
    return build_experiment_config(parse_config_text(Path(path).read_text()))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ParameterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    blob = Path(path).read_bytes()
    cursor = 0

    def take(count: int, what: str) -> bytes:
        nonlocal cursor
        if cursor + count > len(blob):
            raise CheckpointTruncatedError(f"{path}: truncated while reading {what}")
        piece = blob[cursor:cursor + count]
        cursor += count
        return piece

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    version, = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, reader supports {CHECKPOINT_VERSION}")
    count, = struct.unpack("<Q", take(8, "parameter count"))
    items = []
    for _ in range(count):
        name_len, = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        rank, = struct.unpack("<B", take(1, "rank"))
        dims = tuple(struct.unpack("<Q", take(8, "dims"))[0] for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(size * 8, f"data for {name!r}"), dtype="<f8")
        items.append((name, data.reshape(dims).astype(np.float64)))
    if cursor != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - cursor} trailing bytes")
    return ParameterSet(items)


# -- metrics ---------------------------------------------------------------------

def _format_json_value(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not np.isfinite(value):
            raise MetricsFormatError(f"cannot serialize non-finite float {value!r}")
        return format(value, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    raise MetricsFormatError(f"unsupported metrics value type: {type(value).__name__}")


def metrics_line(record: MetricsRecord | Mapping) -> str:
    """One JSON object per line, stable key order, floats at 17 digits."""
    data = asdict(record) if isinstance(record, MetricsRecord) else dict(record)
    parts = (f"{json.dumps(k)}: {_format_json_value(v)}" for k, v in data.items())
    return "{" + ", ".join(parts) + "}"


def emit_metrics(record: MetricsRecord | Mapping, sink) -> None:
    sink.write(metrics_line(record) + "\n")


def iter_metrics(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(f"{path}: malformed line {lineno}: {exc}") from exc
    return records


def export_csv(run_dir) -> Path:
    """Pivot the run's metrics JSONL into metrics.csv (one row per line)."""
    run_dir = Path(run_dir)
    records = iter_metrics(run_dir / "metrics.jsonl")
    out = run_dir / "metrics.csv"
    if not records:
        out.write_text("")
        return out
    keys = list(records[0])
    for rec in records[1:]:
        for k in rec:
            if k not in keys:
                keys.append(k)
    lines = [",".join(keys)]
    for rec in records:
        row = []
        for k in keys:
            v = rec.get(k)
            row.append("" if v is None else
                       format(v, ".17g") if isinstance(v, float) else str(v))
        lines.append(",".join(row))
    out.write_text("\n".join(lines) + "\n")
    return out


# -- training orchestration ---------------------------------------------------

def baseline_train(dataset: Dataset, cfg: GesslConfig) -> tuple[ParameterSet, list[StepMetrics]]:
    """Plain per-batch SSL under the bi-level mode's gradient budget.

    Per episode, performs tasks_per_update * (per-task SSL gradient
    evaluations) single SGD steps, drawing tasks from the same
    (seed, episode, task) stream keys the bi-level mode would use.
    """
    steps_per_episode = cfg.tasks_per_update * nominal_inner_grad_evals_per_task(cfg)
    params = init_encoder(cfg.encoder, cfg.master_seed)
    opt_state = OptimState(cfg.outer_momentum, cfg.outer_weight_decay)
    history: list[StepMetrics] = []
    for episode in range(cfg.episodes):
        key = StreamKey(cfg.master_seed, episode)
        losses = []
        grad_norm = 0.0
        for j in range(steps_per_episode):
            task = make_task(dataset, cfg.batch_classes, cfg.views_per_class,
                             cfg.augmentation, key.for_task(j))
            value, grads = _ssl_loss_and_grad(params, task, cfg.loss)
            params = sgd_step(params, grads, cfg.inner_lr, opt_state)
            losses.append(value)
            grad_norm += float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        history.append(StepMetrics(
            episode=episode,
            inner_loss_mean=float(np.mean(losses)),
            distill_total=0.0,
            outer_grad_norm=grad_norm / max(1, steps_per_episode),
        ))
    return params, history


def evaluate_model(params: ParameterSet, dataset: Dataset, exp: ExperimentConfig,
                   ) -> dict[str, float]:
    """Frozen-feature probes plus the sigma score over a sampled suite."""
    feats = encode(params, dataset.features.data).data
    out: dict[str, float] = {}
    if dataset.true_labels is not None:
        out["linear_probe_acc"] = linear_probe(feats, dataset.true_labels, exp.probe)
        out["knn_acc"] = knn_eval(feats, dataset.true_labels, k=exp.probe.k)
    suite = [make_task(dataset, exp.gessl.batch_classes, exp.gessl.views_per_class,
                       exp.gessl.augmentation, StreamKey(exp.gessl.master_seed, 10_000, j))
             for j in range(exp.sigma_tasks)]
    report = sigma_measure(params, exp.gessl.pi, suite, OracleLabeler.from_tasks(suite),
                           embed_dim=exp.gessl.encoder.embed_dim)
    out["sigma_total"] = report.total
    out["sigma_mean"] = report.per_sample_mean
    return out


def run_experiment(config_path, out_dir=None) -> Path:
    """Parse, train, persist. Returns the artifacts directory."""
    exp = load_experiment_config(config_path)
    dataset = exp.load_dataset()
    if dataset.dim != exp.gessl.encoder.input_dim:
        exp = replace(exp, gessl=replace(
            exp.gessl, encoder=replace(exp.gessl.encoder, input_dim=dataset.dim)))

    run_dir = Path(out_dir if out_dir is not None else exp.out_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe_file = run_dir / ".write_probe"
        probe_file.write_text("")
        probe_file.unlink()
    except OSError as exc:
        raise HarnessError(f"output directory {run_dir} is not writable: {exc}") from exc

    snapshot = Path(config_path).read_text()
    (run_dir / "config.snapshot.txt").write_text(snapshot)

    started = time.perf_counter()
    if exp.mode == "gessl":
        params, history = train(dataset, exp.gessl)
    else:
        params, history = baseline_train(dataset, exp.gessl)

    with open(run_dir / "metrics.jsonl", "w") as sink:
        for metrics in history:
            record = MetricsRecord(
                step=metrics.episode,
                episode=metrics.episode,
                inner_loss_mean=metrics.inner_loss_mean,
                distill_loss=metrics.distill_total,
                outer_grad_norm=metrics.outer_grad_norm,
                probe_acc=None,
                sigma_mean=None,
                seed=exp.gessl.master_seed,
                wall_ms=(time.perf_counter() - started) * 1e3,
            )
            emit_metrics(record, sink)

    save_checkpoint(params, run_dir / "final.ckpt")
    summary = evaluate_model(params, dataset, exp)
    summary["mode"] = exp.mode
    (run_dir / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    export_csv(run_dir)
    return run_dir


def compare_modes(exp: ExperimentConfig, seeds: Sequence[int] | None = None,
                  ) -> dict[str, object]:
    """Train both modes per seed on that seed's dataset; summarize probes."""
    seeds = tuple(exp.comparison_seeds if seeds is None else seeds)
    rows = []
    for seed in seeds:
        cfg = replace(exp.gessl, master_seed=int(seed))
        per_seed_exp = replace(exp, gessl=cfg, synthetic_seed=None)
        dataset = per_seed_exp.load_dataset()
        gessl_params, _ = train(dataset, cfg)
        baseline_params, _ = baseline_train(dataset, cfg)
        g_eval = evaluate_model(gessl_params, dataset, per_seed_exp)
        b_eval = evaluate_model(baseline_params, dataset, per_seed_exp)
        rows.append({
            "seed": int(seed),
            "gessl_probe": g_eval["linear_probe_acc"],
            "baseline_probe": b_eval["linear_probe_acc"],
            "gessl_knn": g_eval["knn_acc"],
            "baseline_knn": b_eval["knn_acc"],
        })
    return {
        "rows": rows,
        "mean_gessl_probe": float(np.mean([r["gessl_probe"] for r in rows])),
        "mean_baseline_probe": float(np.mean([r["baseline_probe"] for r in rows])),
        "mean_gessl_knn": float(np.mean([r["gessl_knn"] for r in rows])),
        "mean_baseline_knn": float(np.mean([r["baseline_knn"] for r in rows])),
    }
