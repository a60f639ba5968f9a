"""Student head and the ranking-distillation training loop.

A batch step follows the mix / label / loss recipe: the student batch is
embedded once, then for each of ``R`` iterations a fresh coefficient and
partner list mix teacher and student batches identically, the teacher
similarities are thresholded into labels (plus mixup labelling), and the
quantized AP loss of the student similarities is accumulated. The batch loss
is the mean over iterations and one Adam step follows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ap_loss import APLossConfig, ap_loss_backward, ap_loss_forward
from .config import RunConfig
from .embed import l2_normalize_columns, l2_normalize_columns_backward, similarity_matrix
from .errors import AllQueriesEmptyError, NonFiniteGradientError, ShapeMismatchError
from .labeling import generate_labels
from .mixup import mix_backward, mix_teacher_student, sample_lambda, sample_partners

log = logging.getLogger(__name__)


class StudentHead:
    """Linear map, or one hidden ReLU layer, followed by l2 normalization.

    Parameters live in ``self.params`` (``W1``, ``b1`` and, with a hidden
    layer, ``W2``, ``b2``). Inputs are column-stacked ``(input_dim, count)``.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        if "W1" not in self.params or "b1" not in self.params:
            raise ShapeMismatchError("a head needs at least W1 and b1")

    @classmethod
    def create(cls, input_dim, output_dim, hidden_dim=0, rng=None, init="random"):
        rng = np.random.default_rng(rng)
        if init == "identity":
            if hidden_dim:
                raise ValueError("identity init is only defined for a linear head")
            W = np.eye(output_dim, input_dim)
            return cls({"W1": W, "b1": np.zeros(output_dim)})
        if hidden_dim:
            return cls({
                "W1": rng.normal(0.0, math.sqrt(2.0 / input_dim), (hidden_dim, input_dim)),
                "b1": np.zeros(hidden_dim),
                "W2": rng.normal(0.0, math.sqrt(1.0 / hidden_dim), (output_dim, hidden_dim)),
                "b2": np.zeros(output_dim),
            })
        return cls({
            "W1": rng.normal(0.0, math.sqrt(1.0 / input_dim), (output_dim, input_dim)),
            "b1": np.zeros(output_dim),
        })

    @property
    def hidden(self) -> bool:
        return "W2" in self.params

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def output_dim(self) -> int:
        return self.params["W2" if self.hidden else "W1"].shape[0]

    def copy(self) -> "StudentHead":
        return StudentHead({k: v.copy() for k, v in self.params.items()})

    def forward_raw(self, raw):
        """Pre-normalization outputs and the activations needed for backward."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[0] != self.input_dim:
            raise ShapeMismatchError(f"head expects {self.input_dim}-d inputs, got {raw.shape[0]}")
        p = self.params
        A = p["W1"] @ raw + p["b1"][:, None]
        if not self.hidden:
            return A, (raw, None)
        Hd = np.maximum(A, 0.0)
        return p["W2"] @ Hd + p["b2"][:, None], (raw, A)

    def __call__(self, raw) -> np.ndarray:
        return l2_normalize_columns(self.forward_raw(raw)[0])

    def backward(self, cache, grad_out) -> dict[str, np.ndarray]:
        raw, A = cache
        p = self.params
        if not self.hidden:
            return {"W1": grad_out @ raw.T, "b1": grad_out.sum(axis=1)}
        Hd = np.maximum(A, 0.0)
        gH = (p["W2"].T @ grad_out) * (A > 0)
        return {
            "W2": grad_out @ Hd.T,
            "b2": grad_out.sum(axis=1),
            "W1": gH @ raw.T,
            "b1": gH.sum(axis=1),
        }


def student_forward(raw, head: StudentHead) -> np.ndarray:
    """Normalized student embeddings, shape ``(output_dim, count)``."""
    return head(raw)


def lr_at(epoch: int, base_lr: float = 1e-4, decay: float = 0.01) -> float:
    """Exponentially decayed learning rate ``base_lr * exp(-decay * epoch)``."""
    return base_lr * math.exp(-decay * epoch)


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Weight decay shrinks each parameter by ``lr * weight_decay`` before the
    Adam update is applied.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {k}")
            if g.shape != params[k].shape:
                raise ShapeMismatchError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                params[k] -= lr * self.weight_decay * params[k]
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam, lr: float):
    state.step(params, grads, lr)
    return params


@dataclass
class WeightSnapshot:
    epoch: int
    params: dict[str, np.ndarray]

    @classmethod
    def capture(cls, epoch: int, head: StudentHead) -> "WeightSnapshot":
        return cls(epoch, {k: v.copy() for k, v in head.params.items()})


def weight_average(snapshots) -> StudentHead:
    """Elementwise mean of snapshot parameters."""
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("need at least one snapshot")
    ref = snapshots[0].params
    for s in snapshots[1:]:
        if s.params.keys() != ref.keys() or any(s.params[k].shape != ref[k].shape for k in ref):
            raise ShapeMismatchError(f"snapshot of epoch {s.epoch} does not match the first snapshot")
    n = len(snapshots)
    if n == 1:
        return StudentHead(ref)
    avg = {}
    for k in ref:
        total = snapshots[0].params[k].copy()
        for s in snapshots[1:]:
            total = total + s.params[k]
        avg[k] = total / n
    return StudentHead(avg)


@dataclass
class BatchOutcome:
    loss: float
    grads: dict[str, np.ndarray] | None
    iteration_losses: list[float]
    skipped_iterations: int
    matrix_shapes: list[tuple[int, int]]
    mixed_student: list[np.ndarray | None]
    grad_joint: list[np.ndarray] = field(default_factory=list, repr=False)


def draw_mixing(batch_size: int, cfg: RunConfig, rng: np.random.Generator):
    """Coefficient and partner list for each of the ``R`` iterations."""
    return [(sample_lambda(cfg.alpha, rng), sample_partners(batch_size, rng)) for _ in range(cfg.R)]


def batch_step(head, raw, teacher, cfg: RunConfig, rng=None, draws=None, frozen_mixed=None, with_grad=True):
    """Loss (and parameter gradients) of one batch.

    Args:
        head: the student head.
        raw: student inputs of the batch, ``(input_dim, B)``.
        teacher: normalized teacher embeddings of the batch, ``(N_T, B)``.
        cfg: hyper-parameters and ablation switches.
        rng: random source for mixing draws (ignored when ``draws`` is given).
        draws: explicit ``[(lam, partners), ...]`` per iteration.
        frozen_mixed: per-iteration mixed student blocks used verbatim instead
            of being recomputed from the current parameters.
        with_grad: skip the backward pass when False.

    Raises:
        AllQueriesEmptyError: if every iteration had no positives at all.
    """
    B = raw.shape[1]
    ap_cfg = APLossConfig(cfg.num_bins)
    X, head_cache = head.forward_raw(raw)
    FS = l2_normalize_columns(X)
    teacher = np.asarray(teacher, dtype=np.float64)

    if cfg.no_aug:
        plan = [None]
    elif draws is not None:
        plan = list(draws)
    else:
        plan = draw_mixing(B, cfg, rng)

    losses, shapes, mixed_blocks, joint_grads = [], [], [], []
    grad_F = np.zeros_like(FS)
    skipped = 0
    for r, draw in enumerate(plan):
        if draw is None:
            joint_t, joint_s, mix = teacher, FS, None
        else:
            lam, partners = draw
            joint_t, joint_s, mix = mix_teacher_student(teacher, FS, partners, lam, rng)
            if frozen_mixed is not None:
                joint_s = np.concatenate([FS, frozen_mixed[r]], axis=1)
        S_T = similarity_matrix(joint_t, check=False)
        S_S = similarity_matrix(joint_s, check=False)
        shapes.append(S_S.shape)
        mixed_blocks.append(None if mix is None else joint_s[:, B:].copy())
        Y = generate_labels(S_T, cfg.tau, mix, use_ml=not cfg.no_ml)
        try:
            res = ap_loss_forward(S_S, Y, ap_cfg)
        except AllQueriesEmptyError:
            skipped += 1
            continue
        losses.append(res.loss)
        if with_grad:
            g = ap_loss_backward(res, joint_s, mix, stop_grad=not cfg.all_grad)
            joint_grads.append(g)
            grad_F += g if mix is None else mix_backward(g, FS, mix, stop_grad=not cfg.all_grad)

    if not losses:
        raise AllQueriesEmptyError("no iteration of this batch produced a positive pair")
    n = len(losses)
    loss = sum(losses) / n
    grads = None
    if with_grad:
        grad_X = l2_normalize_columns_backward(X, grad_F / n)
        grads = head.backward(head_cache, grad_X)
    return BatchOutcome(loss, grads, losses, skipped, shapes, mixed_blocks, joint_grads)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    batches: int
    skipped_batches: int
    teacher_queries: int


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Random batches without replacement; a final remainder of < 2 is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def distill_epoch(teacher_all, raw_all, head, optimizer: Adam, cfg: RunConfig, rng, epoch: int, query_count=0) -> EpochStats:
    """One pass over the training set.

    ``teacher_all`` holds the teacher embeddings of every training sample,
    extracted once before training starts.
    """
    lr = lr_at(epoch, cfg.lr, cfg.lr_decay)
    losses, skipped = [], 0
    for idx in iter_batches(raw_all.shape[1], cfg.batch_size, rng):
        try:
            out = batch_step(head, raw_all[:, idx], teacher_all[:, idx], cfg, rng)
        except AllQueriesEmptyError:
            log.warning("epoch %d: batch without any positive pair skipped", epoch)
            skipped += 1
            continue
        optimizer.step(head.params, out.grads, lr)
        losses.append(out.loss)
    loss = float(np.mean(losses)) if losses else float("nan")
    return EpochStats(epoch + 1, lr, loss, len(losses), skipped, query_count)


@dataclass
class TrainResult:
    head: StudentHead
    final_head: StudentHead
    snapshots: list[WeightSnapshot]
    history: list[EpochStats]
    teacher_queries: int


def train(teacher_source, raw_inputs, cfg: RunConfig, head: StudentHead | None = None, on_epoch=None) -> TrainResult:
    """Distill a student head against a teacher.

    Args:
        teacher_source: object with ``query(indices) -> (N_T, len)`` and a
            ``count`` attribute (see :class:`rankdistill.data_io.TeacherQueryCounter`),
            or a plain array of teacher embeddings.
        raw_inputs: student inputs ``(input_dim, |D|)``.
        cfg: run configuration.
        head: initial head; created from ``cfg`` when omitted.
        on_epoch: optional callback receiving each :class:`EpochStats`.

    Returns:
        A :class:`TrainResult` whose ``head`` is the weight average of the
        snapshot epochs (or the last epoch when none was reached).
    """
    cfg.validate()
    raw_inputs = np.asarray(raw_inputs, dtype=np.float64)
    n = raw_inputs.shape[1]
    if n < 2:
        raise ValueError("training needs at least two samples")
    init_seq, train_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if head is None:
        head = StudentHead.create(raw_inputs.shape[0], cfg.student_dim, cfg.hidden_dim, np.random.default_rng(init_seq), cfg.init)
    rng = np.random.default_rng(train_seq)

    if hasattr(teacher_source, "query"):
        teacher_all = teacher_source.query(np.arange(n))
        count = lambda: teacher_source.count  # noqa: E731
    else:
        teacher_all = np.asarray(teacher_source, dtype=np.float64)
        count = lambda: n  # noqa: E731
    if teacher_all.shape[1] != n:
        raise ShapeMismatchError(f"{teacher_all.shape[1]} teacher embeddings for {n} samples")

    optimizer = Adam(weight_decay=cfg.weight_decay)
    snapshots, history = [], []
    for ep in range(cfg.epochs):
        stats = distill_epoch(teacher_all, raw_inputs, head, optimizer, cfg, rng, ep, count())
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if stats.epoch in cfg.snapshot_epochs:
            snapshots.append(WeightSnapshot.capture(stats.epoch, head))
        for k, v in head.params.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteGradientError(f"parameter {k} became non-finite in epoch {stats.epoch}")
    final = weight_average(snapshots) if snapshots else head.copy()
    return TrainResult(final, head, snapshots, history, count())
