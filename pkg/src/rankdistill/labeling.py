"""Pseudo-labels from teacher similarities.

Similarity labelling thresholds the teacher Gram matrix; mixup labelling hands
each mixed sample the positives of both of its parents. Positive sets are held
as a boolean membership matrix so that batch-sized label matrices stay cheap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AsymmetricInputError, IndexOutOfRangeError, InvalidParameterError, ShapeMismatchError
from .mixup import MixRecord


@dataclass(frozen=True)
class PositiveSets:
    """``member[q, z]`` is True iff ``z`` is a positive of query ``q``."""

    member: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.member, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeMismatchError(f"positive sets need a square membership matrix, got {m.shape}")
        object.__setattr__(self, "member", m)

    def __len__(self) -> int:
        return self.member.shape[0]

    def __getitem__(self, q: int) -> set[int]:
        return set(np.flatnonzero(self.member[q]).tolist())

    @property
    def sets(self) -> list[set[int]]:
        return [self[q] for q in range(len(self))]

    def sizes(self) -> np.ndarray:
        return self.member.sum(axis=1)

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.member, self.member.T))

    @classmethod
    def from_sets(cls, sets, size: int | None = None) -> "PositiveSets":
        n = len(sets) if size is None else size
        m = np.zeros((n, n), dtype=bool)
        for q, s in enumerate(sets):
            idx = list(s)
            if idx and (min(idx) < 0 or max(idx) >= n):
                raise IndexOutOfRangeError(f"positive of query {q} outside 0..{n - 1}")
            m[q, idx] = True
        return cls(m)


def _check_tau(tau: float):
    if not 0.0 <= tau <= 1.0:
        raise InvalidParameterError(f"tau must lie in [0, 1], got {tau}")


def similarity_labeling(S_T, tau: float) -> PositiveSets:
    """``P_q = {z != q : S_T[q, z] > tau}``."""
    _check_tau(tau)
    S_T = np.asarray(S_T)
    if S_T.ndim != 2 or S_T.shape[0] != S_T.shape[1]:
        raise ShapeMismatchError("teacher similarity must be square")
    member = S_T > tau
    np.fill_diagonal(member, False)
    return PositiveSets(member)


def mixup_labeling(P: PositiveSets, mix: MixRecord) -> PositiveSets:
    """Union parent positives into each mixed sample, then close symmetrically.

    For every ``(k, r_k, m)``: ``P_m <- P_m | P_k | P_{r_k}``; afterwards every
    added ``z in P_m`` also gets ``m in P_z``. Self pairs are never kept.
    """
    n = len(P)
    k = mix.originals
    r = mix.partners
    m = mix.mixed
    if m.size and m.max() >= n:
        raise IndexOutOfRangeError(f"mix references index {int(m.max())} outside a set of {n}")
    member = P.member.copy()
    # unions read SL rows of originals only; mixed rows are disjoint targets
    member[m] = P.member[m] | P.member[k] | P.member[r]
    member |= member.T
    np.fill_diagonal(member, False)
    return PositiveSets(member)


def build_label_matrix(P: PositiveSets) -> np.ndarray:
    """Binary label matrix ``Y[q, z] = 1`` iff ``z in P_q`` (diagonal zero)."""
    if not P.is_symmetric():
        raise AsymmetricInputError("positive sets are not symmetric")
    Y = P.member.astype(np.uint8)
    np.fill_diagonal(Y, 0)
    return Y


def generate_labels(S_T, tau: float, mix: MixRecord | None = None, use_ml: bool = True) -> np.ndarray:
    """SL, optionally followed by ML, then the label matrix."""
    P = similarity_labeling(S_T, tau)
    if mix is not None and use_ml:
        P = mixup_labeling(P, mix)
    return build_label_matrix(P)
