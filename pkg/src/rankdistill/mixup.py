"""Mixup of global representations with per-batch coefficient sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed import ZERO_NORM, l2_normalize_columns, l2_normalize_columns_backward
from .errors import IndexOutOfRangeError, InvalidParameterError, LengthMismatchError, ZeroVectorError

MAX_RESAMPLE = 100


@dataclass(frozen=True)
class MixRecord:
    """Which originals formed each mixed column.

    Mixed column ``batch_size + k`` is built from original ``k`` and its partner
    ``partners[k]`` with coefficient ``lam``.
    """

    partners: np.ndarray
    lam: float
    batch_size: int

    def __post_init__(self):
        partners = np.asarray(self.partners, dtype=np.int64)
        if partners.shape != (self.batch_size,):
            raise LengthMismatchError("need exactly one partner per original")
        if partners.size and (partners.min() < 0 or partners.max() >= self.batch_size):
            raise IndexOutOfRangeError("partner index outside the batch")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        partners.setflags(write=False)
        object.__setattr__(self, "partners", partners)

    @property
    def originals(self) -> np.ndarray:
        return np.arange(self.batch_size)

    @property
    def mixed(self) -> np.ndarray:
        return np.arange(self.batch_size, 2 * self.batch_size)

    @property
    def entries(self) -> list[tuple[int, int, int]]:
        B = self.batch_size
        return [(k, int(r), B + k) for k, r in enumerate(self.partners)]


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw a single mixing coefficient from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def sample_partners(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly random partner ``r_k != k`` for every ``k`` in the batch."""
    if batch_size < 2:
        raise InvalidParameterError(f"mixing needs a batch of at least 2, got {batch_size}")
    draw = rng.integers(0, batch_size - 1, size=batch_size)
    k = np.arange(batch_size)
    return draw + (draw >= k)


def _resample_one(k: int, batch_size: int, rng: np.random.Generator) -> int:
    j = int(rng.integers(0, batch_size - 1))
    return j + (j >= k)


def _mix_unnormalized(F: np.ndarray, partners: np.ndarray, lam: float) -> np.ndarray:
    return lam * F + (1.0 - lam) * F[:, partners]


def _mixed_columns(F: np.ndarray, partners: np.ndarray, lam: float) -> np.ndarray:
    # the endpoints reproduce a parent exactly instead of renormalizing it
    if lam == 1.0:
        return F.copy()
    if lam == 0.0:
        return F[:, partners]
    return l2_normalize_columns(_mix_unnormalized(F, partners, lam))


def _degenerate(X: np.ndarray) -> np.ndarray:
    return ~(np.linalg.norm(X, axis=0) >= ZERO_NORM)


def _resolve_degenerate(blocks, partners, lam, rng):
    partners = np.array(partners, dtype=np.int64)
    B = partners.size
    for _ in range(MAX_RESAMPLE):
        bad = np.zeros(B, dtype=bool)
        for F in blocks:
            bad |= _degenerate(_mix_unnormalized(F, partners, lam))
        if not bad.any():
            return partners
        if rng is None:
            raise ZeroVectorError(f"mixed columns {np.flatnonzero(bad)[:10].tolist()} collapse to zero")
        for k in np.flatnonzero(bad):
            partners[k] = _resample_one(int(k), B, rng)
    raise ZeroVectorError("could not find non-degenerate mixing partners")


def _check_inputs(F, partners, lam):
    F = np.asarray(F, dtype=np.float64)
    partners = np.asarray(partners, dtype=np.int64)
    if partners.shape != (F.shape[1],):
        raise LengthMismatchError(f"{partners.size} partners for a batch of {F.shape[1]}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda must lie in [0, 1], got {lam}")
    return F, partners


def mix_batch(F, partners, lam: float, rng: np.random.Generator | None = None):
    """Append mixed columns to a normalized batch.

    Column ``B + k`` of the result is ``normalize(lam * f_k + (1 - lam) * f_{r_k})``.
    If a mix collapses to zero (antipodal pair at ``lam = 0.5``) the partner is
    resampled from ``rng``; without ``rng`` a :class:`ZeroVectorError` is raised.

    Returns:
        ``(joint, record)`` with ``joint`` of shape ``(dim, 2B)``.
    """
    F, partners = _check_inputs(F, partners, lam)
    partners = _resolve_degenerate([F], partners, lam, rng)
    mixed = _mixed_columns(F, partners, lam)
    record = MixRecord(partners, float(lam), F.shape[1])
    return np.concatenate([F, mixed], axis=1), record


def mix_teacher_student(FT, FS, partners, lam: float, rng: np.random.Generator | None = None):
    """Mix teacher and student batches with the same partners and coefficient."""
    FT, partners = _check_inputs(FT, partners, lam)
    FS = np.asarray(FS, dtype=np.float64)
    if FS.shape[1] != FT.shape[1]:
        raise LengthMismatchError("teacher and student batches differ in size")
    partners = _resolve_degenerate([FT, FS], partners, lam, rng)
    record = MixRecord(partners, float(lam), FT.shape[1])
    joint_t = np.concatenate([FT, _mixed_columns(FT, partners, lam)], axis=1)
    joint_s = np.concatenate([FS, _mixed_columns(FS, partners, lam)], axis=1)
    return joint_t, joint_s, record


def mix_backward(grad_joint, F, mix: MixRecord, stop_grad: bool = True) -> np.ndarray:
    """Fold a gradient over the joint ``(dim, 2B)`` set back onto the originals.

    With ``stop_grad`` the mixed block is treated as constant and simply
    dropped. Otherwise it is propagated through the renormalization and the
    convex combination into both parents.
    """
    grad_joint = np.asarray(grad_joint, dtype=np.float64)
    B = mix.batch_size
    grad = grad_joint[:, :B].copy()
    if stop_grad:
        return grad
    F = np.asarray(F, dtype=np.float64)
    X = _mix_unnormalized(F, mix.partners, mix.lam)
    gx = l2_normalize_columns_backward(X, grad_joint[:, B:])
    grad += mix.lam * gx
    np.add.at(grad.T, mix.partners, ((1.0 - mix.lam) * gx).T)
    return grad
