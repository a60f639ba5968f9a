"""End-to-end pipelines shared by the command line, sweeps and demos."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data_io
from .config import RunConfig
from .data_io import Manifest, TeacherQueryCounter, World, WorldSpec, generate_world, split_world
from .embed import l2_normalize_columns, similarity_matrix
from .evaluation import (
    RetrievalGroundTruth,
    apply_whitening,
    evaluate,
    fit_whitening,
    read_ground_truth,
    write_ground_truth,
)
from .labeling import mixup_labeling, similarity_labeling
from .mixup import mix_batch, sample_lambda, sample_partners
from .trainer import StudentHead, TrainResult, train

LOG_COLUMNS = ("epoch", "lr", "loss", "batches", "skipped_batches", "teacher_queries")
SWEEP_COLUMNS = ("param", "value", "variant", "seed", "mAP", "mP@10", "final_loss", "teacher_queries")


# -- data generation ------------------------------------------------------------

def write_world(out_dir, world: World, train_size: int, num_queries: int, split_seed: int | None = None) -> Path:
    """Write a generated world as embedding files plus manifest; returns the manifest path."""
    out = data_io.ensure_dir(out_dir)
    split = split_world(world, train_size, num_queries, world.spec.seed if split_seed is None else split_seed)
    files = {
        "teacher": ("train_teacher.rdem", world.teacher[:, split["train"]]),
        "student-raw": ("train_student_raw.rdem", world.student_raw[:, split["train"]]),
        "query": ("query_raw.rdem", world.student_raw[:, split["query"]]),
        "database": ("database_raw.rdem", world.student_raw[:, split["database"]]),
        "whiten": ("train_student_raw.rdem", None),
    }
    for role, (name, data) in files.items():
        if data is not None:
            data_io.write_embedding_file(out / name, data)
    gt = RetrievalGroundTruth.from_labels(world.labels[split["query"]], world.labels[split["database"]])
    write_ground_truth(out / "ground_truth.txt", gt)
    order = np.concatenate([split[k] for k in ("train", "query", "database")])
    np.savetxt(out / "labels.txt", np.stack([order, world.labels[order]], axis=1), fmt="%d",
               header="sample_index cluster (train, query, database order)")
    world_meta = data_io.world_spec_dict(world.spec) | {"train_size": train_size, "num_queries": num_queries}
    manifest = Manifest({r: n for r, (n, _) in files.items()}, "ground_truth.txt", world_meta, out)
    data_io.write_manifest(out / "manifest.json", manifest)
    return out / "manifest.json"


# -- training / evaluation ----------------------------------------------------------

@dataclass
class Dataset:
    """In-memory view of a manifest (or a freshly generated world)."""

    teacher: np.ndarray
    student_raw: np.ndarray
    query_raw: np.ndarray | None = None
    database_raw: np.ndarray | None = None
    whiten_raw: np.ndarray | None = None
    ground_truth: RetrievalGroundTruth | None = None

    @classmethod
    def from_manifest(cls, manifest: Manifest, need_eval: bool = False) -> "Dataset":
        def load(role):
            return data_io.read_embedding_file(manifest.path(role)) if manifest.has(role) else None

        teacher = load("teacher")
        student = load("student-raw")
        if teacher is None or student is None:
            raise data_io.FileFormatError("manifest needs 'teacher' and 'student-raw' entries")
        gt = None
        if need_eval:
            gt = read_ground_truth(manifest.ground_truth_path())
        ds = cls(l2_normalize_columns(teacher), student, load("query"), load("database"), load("whiten"), gt)
        if need_eval:
            if ds.query_raw is None or ds.database_raw is None:
                raise data_io.FileFormatError("manifest needs 'query' and 'database' entries for evaluation")
            gt.validate(ds.query_raw.shape[1], ds.database_raw.shape[1])
        return ds

    @classmethod
    def from_world(cls, world: World, train_size: int, num_queries: int, split_seed: int | None = None) -> "Dataset":
        split = split_world(world, train_size, num_queries, world.spec.seed if split_seed is None else split_seed)
        gt = RetrievalGroundTruth.from_labels(world.labels[split["query"]], world.labels[split["database"]])
        return cls(
            world.teacher[:, split["train"]], world.student_raw[:, split["train"]],
            world.student_raw[:, split["query"]], world.student_raw[:, split["database"]],
            world.student_raw[:, split["train"]], gt,
        )

    def subset(self, size: int, seed: int = 0) -> "Dataset":
        """First ``size`` samples of a seeded permutation of the training set."""
        n = self.teacher.shape[1]
        if not 2 <= size <= n:
            raise ValueError(f"training subset must have 2..{n} samples, got {size}")
        idx = np.sort(np.random.default_rng(seed).permutation(n)[:size])
        return Dataset(self.teacher[:, idx], self.student_raw[:, idx], self.query_raw, self.database_raw,
                       self.whiten_raw, self.ground_truth)


def evaluate_head(head: StudentHead, ds: Dataset, k: int = 10, whiten: bool = False, whiten_raw=None,
                  whiten_dim: int | None = None) -> dict:
    q = head(ds.query_raw)
    db = head(ds.database_raw)
    rows = {}
    m = evaluate(q, db, ds.ground_truth, k)
    rows["mAP"], rows[f"mP@{k}"] = m["mAP"], m[f"mP@{k}"]
    if whiten:
        src = ds.whiten_raw if whiten_raw is None else whiten_raw
        if src is None:
            raise data_io.FileFormatError("whitening requested but no whitening set is available")
        model = fit_whitening(head(src), whiten_dim or head.output_dim)
        mw = evaluate(apply_whitening(model, q), apply_whitening(model, db), ds.ground_truth, k)
        rows["mAP+whiten"], rows[f"mP@{k}+whiten"] = mw["mAP"], mw[f"mP@{k}"]
    return rows


def run_distillation(ds: Dataset, cfg: RunConfig, on_epoch=None) -> TrainResult:
    source = TeacherQueryCounter(ds.teacher)
    return train(source, ds.student_raw, cfg, on_epoch=on_epoch)


def write_training_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for s in history:
            w.writerow([s.epoch, repr(s.lr), repr(s.loss), s.batches, s.skipped_batches, s.teacher_queries])


def write_run_outputs(out_dir, result: TrainResult, cfg: RunConfig) -> dict[str, Path]:
    """Training log, per-snapshot checkpoints and the averaged final head."""
    out = data_io.ensure_dir(out_dir)
    write_training_log(out / "training_log.csv", result.history)
    digest = cfg.digest()
    paths = {"log": out / "training_log.csv"}
    for snap in result.snapshots:
        p = out / f"head_epoch{snap.epoch:03d}.rdck"
        data_io.write_checkpoint(p, snap.params, {"epoch": snap.epoch, "config_hash": digest, "kind": "snapshot"})
        paths[f"epoch{snap.epoch}"] = p
    final = out / "head_final.rdck"
    epochs = [s.epoch for s in result.snapshots] or [cfg.epochs]
    data_io.write_checkpoint(final, result.head.params, {
        "epoch": max(epochs), "averaged_epochs": epochs, "config_hash": digest, "kind": "final",
        "teacher_queries": result.teacher_queries,
    })
    paths["final"] = final
    return paths


def write_config_echo(out_dir, cfg: RunConfig, extra: dict | None = None) -> Path:
    p = Path(out_dir) / "config.json"
    doc = {"config": cfg.to_dict(), "config_hash": cfg.digest()}
    if extra:
        doc.update(extra)
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return p


# -- label inspection ------------------------------------------------------------------

def positive_set_sizes(teacher, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """Positive-set cardinalities over the joint set of one sampled batch."""
    n = teacher.shape[1]
    B = min(cfg.batch_size, n)
    idx = rng.permutation(n)[:B]
    F = teacher[:, idx]
    if cfg.no_aug:
        return similarity_labeling(similarity_matrix(F, check=False), cfg.tau).sizes()
    lam = sample_lambda(cfg.alpha, rng)
    joint, mix = mix_batch(F, sample_partners(B, rng), lam, rng)
    P = similarity_labeling(similarity_matrix(joint, check=False), cfg.tau)
    if not cfg.no_ml:
        P = mixup_labeling(P, mix)
    return P.sizes()


def label_statistics(sizes: np.ndarray) -> tuple[list[tuple[int, int, float]], dict[str, float]]:
    counts = np.bincount(sizes)
    n = sizes.size
    hist = [(c, int(k), float(k / n)) for c, k in enumerate(counts) if k]
    summary = {
        "num_queries": float(n),
        "empty_fraction": float(np.mean(sizes == 0)),
        "mean_positive_size": float(sizes.mean()),
        "max_positive_size": float(sizes.max()),
    }
    return hist, summary


# -- sweeps ------------------------------------------------------------------------------

SWEEPABLE = {"tau": float, "R": int, "D": int}


def sweep_point(ds: Dataset, param: str, value, variant: str, cfg: RunConfig) -> dict:
    if param == "tau":
        cfg = cfg.with_(tau=float(value))
    elif param == "R":
        cfg = cfg.with_(R=int(value))
    if variant == "no-aug":
        cfg = cfg.with_(no_aug=True)
    train_ds = ds.subset(int(value), cfg.seed) if param == "D" else ds
    result = run_distillation(train_ds, cfg)
    metrics = evaluate_head(result.head, train_ds)
    return {
        "param": param, "value": value, "variant": variant, "seed": cfg.seed,
        "mAP": metrics["mAP"], "mP@10": metrics["mP@10"],
        "final_loss": result.history[-1].loss, "teacher_queries": result.teacher_queries,
    }


def _sweep_job(args):
    return sweep_point(*args)


def sweep(ds: Dataset, param: str, grid, cfg: RunConfig, variants=("aug",), jobs: int = 1) -> list[dict]:
    """Train and evaluate once per grid value and variant, keeping everything else fixed."""
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose one of {sorted(SWEEPABLE)}")
    points = [(ds, param, SWEEPABLE[param](v), var, cfg) for v in grid for var in variants]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, points))
    return [_sweep_job(p) for p in points]


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def desk_world(seed: int, sparse: bool = False, **overrides) -> World:
    """The synthetic world used for desk-scale trend checks."""
    params = dict(num_clusters=20, samples_per_cluster=100, teacher_dim=64, student_input_dim=64,
                  kappa=DESK_KAPPA_SPARSE if sparse else DESK_KAPPA, sigma=DESK_SIGMA,
                  nn_cap=3 if sparse else None, seed=seed)
    params.update(overrides)
    return generate_world(WorldSpec(**params))


DESK_KAPPA = 3.0
DESK_KAPPA_SPARSE = 2.0
DESK_SIGMA = 0.2
DESK_TRAIN_SIZE = 200
DESK_QUERIES = 200


def desk_config(seed: int, **overrides) -> RunConfig:
    """Small-batch MLP recipe that trains in seconds on a desk world."""
    params = dict(hidden_dim=256, batch_size=50, lr=1e-2, seed=seed)
    params.update(overrides)
    return RunConfig(**params)


def desk_dataset(seed: int, sparse: bool = False, **overrides) -> Dataset:
    world = desk_world(seed, sparse, **overrides)
    return Dataset.from_world(world, DESK_TRAIN_SIZE, DESK_QUERIES)
