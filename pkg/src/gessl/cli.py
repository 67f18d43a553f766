"""Command-line entry points.

Subcommands: train (run an experiment from a config file), probe
(evaluate a checkpoint's frozen features), sigma (universality score of
one or more checkpoints over a sampled task suite), hypergrad-bench
(strategy accuracy/cost on the quadratic oracle family), gradcheck
(tensor-core gradient sweep), and gen-data (write a synthetic dataset).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    HarnessError,
    build_experiment_config,
    load_checkpoint,
    run_experiment,
)
from .hypergrad import benchmark_strategies, quadratic_family
from .models import encode
from .sigma import OracleLabeler, ProbeConfig, knn_eval, linear_probe, sigma_measure
from .taskgen import (
    DatasetFormatError,
    StreamKey,
    SyntheticSpec,
    generate_synthetic,
    load_cifar10_batch,
    load_raw_dataset,
    make_task,
    save_raw_dataset,
)
from .tensor import gradcheck_suite

GRADCHECK_TOLERANCE = 1e-6


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="path to a raw GSDS dataset file")
    parser.add_argument("--cifar", help="path to a CIFAR-10 binary batch")
    parser.add_argument("--cifar-limit", type=int, default=1000)


def _load_data(args):
    if args.data and args.cifar:
        raise HarnessError("pass only one of --data and --cifar")
    if args.data:
        return load_raw_dataset(args.data)
    if args.cifar:
        return load_cifar10_batch(args.cifar, limit=args.cifar_limit)
    raise HarnessError("a dataset is required: pass --data or --cifar")


def _cmd_train(args) -> int:
    run_dir = run_experiment(args.config, out_dir=args.out)
    print(f"artifacts written to {run_dir}")
    return 0


def _cmd_probe(args) -> int:
    dataset = _load_data(args)
    if dataset.true_labels is None:
        raise HarnessError("probe needs a labeled dataset")
    params = load_checkpoint(args.checkpoint)
    probe = ProbeConfig(epochs=args.epochs, lr=args.lr, l2=args.l2, k=args.k, seed=args.seed)
    feats = encode(params, dataset.features.data).data
    result = {
        "checkpoint": args.checkpoint,
        "linear_probe_acc": linear_probe(feats, dataset.true_labels, probe),
        "knn_acc": knn_eval(feats, dataset.true_labels, k=probe.k),
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _cmd_sigma(args) -> int:
    from .models import PrototypePi

    dataset = _load_data(args)
    suite = [make_task(dataset, args.batch_classes, args.views, _identity_aug(),
                       StreamKey(args.seed, 0, j)) for j in range(args.tasks)]
    oracle = OracleLabeler.from_tasks(suite)
    rows = []
    for ckpt in args.checkpoints:
        params = load_checkpoint(ckpt)
        report = sigma_measure(params, PrototypePi(tau=args.pi_tau), suite, oracle)
        rows.append({"model": ckpt, "task_suite": f"{args.tasks}x{args.batch_classes}way",
                     "sigma_total": report.total, "sigma_mean": report.per_sample_mean})
    totals = [r["sigma_total"] for r in rows]
    lo, hi = min(totals), max(totals)
    for r in rows:
        r["normalized"] = 0.0 if hi == lo else (r["sigma_total"] - lo) / (hi - lo)
    print(json.dumps(rows, indent=2))
    if args.out:
        lines = ["model,task_suite,sigma_total,sigma_mean,normalized"]
        lines += [f'{r["model"]},{r["task_suite"]},{r["sigma_total"]:.17g},'
                  f'{r["sigma_mean"]:.17g},{r["normalized"]:.17g}' for r in rows]
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def _identity_aug():
    from .taskgen import AugmentationSpec

    return AugmentationSpec(noise_sigma=0.0, dropout_p=0.0, scale_range=(1.0, 1.0))


def _cmd_hypergrad_bench(args) -> int:
    cases = quadratic_family(count=args.count, max_dim=args.max_dim, seed=args.seed)
    rows = benchmark_strategies(cases)
    by_strategy: dict[str, list[dict]] = {}
    for row in rows:
        by_strategy.setdefault(row["strategy"], []).append(row)
    print(f"{'strategy':<14}{'mean rel err':>14}{'max rel err':>14}"
          f"{'mean grad evals':>17}{'mean wall ms':>14}")
    for name, group in by_strategy.items():
        errs = [g["rel_error"] for g in group]
        print(f"{name:<14}{np.mean(errs):>14.3e}{np.max(errs):>14.3e}"
              f"{np.mean([g['grad_evals'] for g in group]):>17.1f}"
              f"{np.mean([g['wall_ms'] for g in group]):>14.3f}")
    if args.out:
        lines = ["strategy,problem,dim,rel_error,grad_evals,wall_ms"]
        lines += [f'{r["strategy"]},{r["problem"]},{r["dim"]},{r["rel_error"]:.17g},'
                  f'{r["grad_evals"]},{r["wall_ms"]:.6g}' for r in rows]
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(trials_per_op=args.trials, seed=args.seed)
    failed = False
    for op, err in sorted(worst.items()):
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{op:<20}{err:.3e}  {status}")
    return 1 if failed else 0


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(classes=args.classes, per_class=args.per_class, dim=args.dim,
                         center_scale=args.center_scale, within_sigma=args.within_sigma)
    dataset = generate_synthetic(spec, args.seed)
    save_raw_dataset(dataset, args.out)
    print(f"wrote {dataset.n_rows} rows of dim {dataset.dim} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gessl",
                                     description="bi-level SSL trainer and evaluator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run an experiment from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", help="override the config's output directory")
    p_train.set_defaults(func=_cmd_train)

    p_probe = sub.add_parser("probe", help="linear probe + k-NN on frozen features")
    p_probe.add_argument("--checkpoint", required=True)
    _add_data_args(p_probe)
    p_probe.add_argument("--epochs", type=int, default=200)
    p_probe.add_argument("--lr", type=float, default=0.5)
    p_probe.add_argument("--l2", type=float, default=1e-4)
    p_probe.add_argument("--k", type=int, default=5)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.set_defaults(func=_cmd_probe)

    p_sigma = sub.add_parser("sigma", help="sigma universality score over sampled tasks")
    p_sigma.add_argument("checkpoints", nargs="+")
    _add_data_args(p_sigma)
    p_sigma.add_argument("--tasks", type=int, default=16)
    p_sigma.add_argument("--batch-classes", type=int, default=16)
    p_sigma.add_argument("--views", type=int, default=2)
    p_sigma.add_argument("--pi-tau", type=float, default=0.1)
    p_sigma.add_argument("--seed", type=int, default=0)
    p_sigma.add_argument("--out", help="write the radar-plot CSV here")
    p_sigma.set_defaults(func=_cmd_sigma)

    p_bench = sub.add_parser("hypergrad-bench",
                             help="strategy accuracy/cost on quadratic oracles")
    p_bench.add_argument("--count", type=int, default=50)
    p_bench.add_argument("--max-dim", type=int, default=16)
    p_bench.add_argument("--seed", type=int, default=2024)
    p_bench.add_argument("--out", help="write the per-problem CSV here")
    p_bench.set_defaults(func=_cmd_hypergrad_bench)

    p_gc = sub.add_parser("gradcheck", help="finite-difference sweep over all ops")
    p_gc.add_argument("--trials", type=int, default=100)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(func=_cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="write a synthetic blob dataset")
    p_gen.add_argument("--classes", type=int, default=8)
    p_gen.add_argument("--per-class", type=int, default=100, dest="per_class")
    p_gen.add_argument("--dim", type=int, default=16)
    p_gen.add_argument("--center-scale", type=float, default=3.0)
    p_gen.add_argument("--within-sigma", type=float, default=1.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen_data)

    return parser


def cli_dispatch(argv) -> int:
    """Parse and run; argparse usage failures exit with code 2."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (HarnessError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
