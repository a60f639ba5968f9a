"""Command line: ``rankdistill {gen-data,distill,eval,sweep,inspect-labels}``.

Configuration precedence is command-line flag, then ``--config`` JSON file,
then built-in defaults. ``RD_SEED`` supplies the seed when neither sets it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io, experiments
from .config import RunConfig
from .errors import RankDistillError
from .evaluation import write_metrics_csv
from .trainer import StudentHead

log = logging.getLogger("rankdistill")

_RUN_FLAGS = {
    # flag dest -> (RunConfig field, type, help)
    "tau": ("tau", float, "similarity threshold for labelling"),
    "R": ("R", int, "mixing iterations per batch"),
    "batch_size": ("batch_size", int, "batch size B"),
    "alpha": ("alpha", float, "Beta(alpha, alpha) parameter for the mixing coefficient"),
    "num_bins": ("num_bins", int, "AP histogram bins C"),
    "lr": ("lr", float, "initial learning rate"),
    "lr_decay": ("lr_decay", float, "per-epoch exponential decay rate"),
    "weight_decay": ("weight_decay", float, "decoupled weight decay"),
    "epochs": ("epochs", int, "training epochs"),
    "seed": ("seed", int, "random seed (falls back to $RD_SEED)"),
    "student_dim": ("student_dim", int, "student embedding dimension N_S"),
    "hidden_dim": ("hidden_dim", int, "hidden width of the student head (0 = linear)"),
    "init": ("init", str, "head initialisation: random | identity"),
}


class CLIError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    for dest, (_, typ, hlp) in _RUN_FLAGS.items():
        g.add_argument("--" + dest.replace("_", "-"), dest=dest, type=typ, default=None, help=hlp)
    g.add_argument("--snapshot-epochs", type=lambda s: tuple(int(x) for x in s.split(",") if x), default=None,
                   help="comma-separated epochs whose weights are averaged")
    g.add_argument("--no-aug", action="store_true", default=None, help="train on original batches only")
    g.add_argument("--no-ml", action="store_true", default=None, help="disable mixup labelling")
    g.add_argument("--all-grad", action="store_true", default=None,
                   help="back-propagate through mixed representations")


def resolve_config(args) -> RunConfig:
    merged: dict = {}
    if getattr(args, "config", None):
        try:
            merged.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config file {args.config}: {exc}") from None
        merged = merged.get("config", merged)
    if "seed" not in merged and os.environ.get("RD_SEED"):
        try:
            merged["seed"] = int(os.environ["RD_SEED"])
        except ValueError:
            raise CLIError(f"RD_SEED must be an integer, got {os.environ['RD_SEED']!r}") from None
    for dest, (field, _, _) in _RUN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            merged[field] = v
    for dest in ("snapshot_epochs", "no_aug", "no_ml", "all_grad"):
        v = getattr(args, dest, None)
        if v is not None:
            merged[dest] = v
    try:
        cfg = RunConfig.from_dict(merged)
    except (TypeError, RankDistillError) as exc:
        raise CLIError(str(exc)) from None
    problems = cfg.problems()
    if problems:
        raise CLIError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def _echo(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return "effective config: " + " ".join(f"{k}={d[k]}" for k in d)


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.out is None:
        raise CLIError("gen-data needs an output directory (--out DIR)")
    if args.out.exists() and not args.out.is_dir():
        raise CLIError(f"output path {args.out} exists and is not a directory")
    seed = args.seed if args.seed is not None else int(os.environ.get("RD_SEED", 0))
    spec = data_io.WorldSpec(
        num_clusters=args.clusters, samples_per_cluster=args.per_cluster, teacher_dim=args.teacher_dim,
        student_input_dim=args.student_input_dim, kappa=args.kappa, sigma=args.sigma, nn_cap=args.nn_cap,
        nn_tau=args.nn_tau, scales=args.scales, pooling=args.pooling, pool_p=args.gem_p, seed=seed,
    )
    world = data_io.generate_world(spec)
    train_size = args.train_size if args.train_size is not None else world.size // 2
    manifest = experiments.write_world(args.out, world, train_size, args.queries)
    print(f"wrote {world.size} samples ({train_size} train) to {args.out}; manifest {manifest}")
    if spec.nn_cap is not None:
        counts = data_io.neighbor_counts(world.teacher, spec.nn_tau)
        ok = int(counts.max()) <= spec.nn_cap
        print(f"neighbour audit: max {int(counts.max())} neighbours above {spec.nn_tau} "
              f"(cap {spec.nn_cap}): {'PASS' if ok else 'FAIL'}")
        if not ok:
            return 1
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    print(_echo(cfg))
    manifest = data_io.read_manifest(args.manifest)
    ds = experiments.Dataset.from_manifest(manifest)
    out = data_io.ensure_dir(args.out)
    experiments.write_config_echo(out, cfg, {"manifest": str(args.manifest)})

    def report(s):
        print(f"epoch {s.epoch:3d}  lr {s.lr:.4e}  loss {s.loss:.6f}  "
              f"batches {s.batches}  skipped {s.skipped_batches}  teacher queries {s.teacher_queries}")

    result = experiments.run_distillation(ds, cfg, on_epoch=report)
    paths = experiments.write_run_outputs(out, result, cfg)
    print(f"teacher queries: {result.teacher_queries} for |D| = {ds.teacher.shape[1]}")
    print(f"final head: {paths['final']}")
    return 0


def cmd_eval(args) -> int:
    manifest = data_io.read_manifest(args.manifest)
    if not manifest.ground_truth:
        raise CLIError(f"{args.manifest} lists no ground-truth file")
    if not manifest.ground_truth_path().exists():
        raise CLIError(f"ground-truth file {manifest.ground_truth_path()} not found")
    ds = experiments.Dataset.from_manifest(manifest, need_eval=True)
    head = StudentHead(data_io.read_checkpoint(args.checkpoint))
    whiten_raw = data_io.read_embedding_file(args.whiten_train) if args.whiten_train else None
    whiten = args.whiten or whiten_raw is not None
    metrics = experiments.evaluate_head(head, ds, args.k, whiten=whiten, whiten_raw=whiten_raw,
                                        whiten_dim=args.whiten_dim)
    split = ds.ground_truth.split
    rows = [(name, split, value) for name, value in metrics.items()]
    if args.out:
        write_metrics_csv(args.out, rows)
    writer = csv.writer(sys.stdout)
    writer.writerow(("metric", "split", "value"))
    for r in rows:
        writer.writerow((r[0], r[1], f"{r[2]:.6f}"))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    print(_echo(cfg))
    grid = [g for g in args.grid.split(",") if g]
    if not grid:
        raise CLIError("--grid needs at least one value")
    variants = tuple(args.variants.split(",")) if args.variants else (("aug", "no-aug") if args.param == "D" else ("aug",))
    for v in variants:
        if v not in ("aug", "no-aug"):
            raise CLIError(f"unknown variant {v!r}")
    manifest = data_io.read_manifest(args.manifest)
    ds = experiments.Dataset.from_manifest(manifest, need_eval=True)
    if args.param == "D" and max(int(g) for g in grid) > ds.teacher.shape[1]:
        raise CLIError(f"training set has only {ds.teacher.shape[1]} samples")
    rows = experiments.sweep(ds, args.param, grid, cfg, variants, jobs=args.jobs)
    out = Path(args.out)
    data_io.ensure_dir(out.parent)
    experiments.write_sweep_csv(out, rows)
    experiments.write_config_echo(out.parent, cfg, {"sweep": args.param, "grid": grid, "variants": list(variants)})
    for r in rows:
        print(f"{r['param']}={r['value']:<8} {r['variant']:<7} mAP {r['mAP']:.4f}  mP@10 {r['mP@10']:.4f}")
    return 0


def cmd_inspect_labels(args) -> int:
    cfg = resolve_config(args)
    manifest = data_io.read_manifest(args.manifest)
    ds = experiments.Dataset.from_manifest(manifest)
    rng = np.random.default_rng(cfg.seed)
    sizes = np.concatenate([experiments.positive_set_sizes(ds.teacher, cfg, rng) for _ in range(args.batches)])
    hist, summary = experiments.label_statistics(sizes)
    out = Path(args.out)
    data_io.ensure_dir(out.parent)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("cardinality", "count", "fraction"))
        for c, k, f in hist:
            w.writerow((c, k, repr(f)))
    summary_path = out.with_name(out.stem + "_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("statistic", "value"))
        for k, v in summary.items():
            w.writerow((k, repr(v)))
    print(f"queries {int(summary['num_queries'])}  empty fraction {summary['empty_fraction']:.4f}  "
          f"mean |P_q| {summary['mean_positive_size']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic embedding world")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--per-cluster", type=int, default=100)
    p.add_argument("--teacher-dim", type=int, default=64)
    p.add_argument("--student-input-dim", type=int, default=64)
    p.add_argument("--kappa", type=float, default=experiments.DESK_KAPPA)
    p.add_argument("--sigma", type=float, default=experiments.DESK_SIGMA)
    p.add_argument("--nn-cap", type=int, default=None)
    p.add_argument("--nn-tau", type=float, default=0.75)
    p.add_argument("--scales", type=int, default=1, help="noisy student views pooled per sample")
    p.add_argument("--pooling", choices=("gem", "mac"), default="gem")
    p.add_argument("--gem-p", type=float, default=1.0)
    p.add_argument("--train-size", type=int, default=None, help="training samples (default: half)")
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("distill", help="train a student head")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="retrieval metrics of a checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--whiten", action="store_true", help="also report PCA-whitened metrics")
    p.add_argument("--whiten-train", type=Path, help="embedding file of student inputs to learn whitening on")
    p.add_argument("--whiten-dim", type=int, help="whitened dimension (default: head output dimension)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", type=Path, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metric as a function of one hyper-parameter")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--param", choices=sorted(experiments.SWEEPABLE), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--variants", help="comma-separated subset of aug,no-aug")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-labels", help="positive-set statistics of sampled batches")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--out", type=Path, required=True, help="histogram CSV path")
    _add_run_flags(p)
    p.set_defaults(func=cmd_inspect_labels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        parser.exit(2, f"rankdistill {args.command}: error: {exc}\n")
    except (RankDistillError, OSError, KeyError, ValueError) as exc:
        parser.exit(1, f"rankdistill {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
