"""Dense primitives for global representations.

Embeddings are stored column-stacked: an array of shape ``(dim, count)``
whose columns are individual representations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, NonNormalizedError, ShapeMismatchError, ZeroVectorError

ZERO_NORM = 1e-12
NORM_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Column-stacked representations with a role tag.

    ``data`` has shape ``(dim, count)``. When ``normalized`` is set every column
    is expected to have unit Euclidean norm.
    """

    data: np.ndarray
    role: str = "teacher"
    normalized: bool = True

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatchError(f"expected a non-empty (dim, count) matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding matrix contains non-finite entries")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.normalized and not is_normalized(data):
            raise NonNormalizedError("columns do not have unit norm")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_raw(cls, data, role="teacher") -> "EmbeddingMatrix":
        return cls(l2_normalize_columns(data), role=role, normalized=True)


def is_normalized(F: np.ndarray, tol: float = NORM_TOL) -> bool:
    norms = np.linalg.norm(F, axis=0)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroVectorError: if ``||v|| < 1e-12``.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n >= ZERO_NORM:
        raise ZeroVectorError(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def l2_normalize_columns(X) -> np.ndarray:
    """Column-wise :func:`l2_normalize` for a ``(dim, count)`` matrix."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=0)
    bad = ~(norms >= ZERO_NORM)
    if np.any(bad):
        raise ZeroVectorError(f"columns {np.flatnonzero(bad)[:10].tolist()} have (near-)zero norm")
    return X / norms


def similarity_matrix(F, check: bool = True) -> np.ndarray:
    """Gram matrix ``F^T F`` of normalized columns (cosine similarities).

    ``F`` is an :class:`EmbeddingMatrix` or a ``(dim, count)`` array. The result
    is exactly symmetric: ``S == S.T`` holds bit-for-bit.
    """
    if isinstance(F, EmbeddingMatrix):
        if not F.normalized:
            raise NonNormalizedError("similarity_matrix needs normalized embeddings")
        data = F.data
    else:
        data = np.asarray(F, dtype=np.float64)
        if check and not is_normalized(data):
            raise NonNormalizedError("similarity_matrix needs normalized embeddings")
    # A.T @ A dispatches to a symmetric rank-k update, so S is exactly symmetric
    return data.T @ data


def gem_pool(descriptors, p: float = 1.0) -> np.ndarray:
    """Sign-preserving generalized mean over a list of descriptors.

    Each element is combined as ``g(mean(g(x)))`` with ``g(x) = sign(x)|x|^p``
    and the inverse power on the way back, so negative entries keep their sign.
    ``p = 1`` is the arithmetic mean; large ``p`` approaches max pooling of
    magnitudes. Equally shaped matrices are pooled elementwise as well. The
    caller normalizes the result.
    """
    if len(descriptors) == 0:
        raise EmptyInputError("gem_pool needs at least one descriptor")
    if p < 1:
        raise ValueError(f"GeM power must be >= 1, got {p}")
    X = np.stack([np.asarray(d, dtype=np.float64) for d in descriptors])
    if X.ndim < 2:
        raise ShapeMismatchError("descriptors must be arrays of equal shape")
    if p == 1:
        return X.mean(axis=0)
    m = np.mean(np.sign(X) * np.abs(X) ** p, axis=0)
    return np.sign(m) * np.abs(m) ** (1.0 / p)


def mac_pool(descriptors) -> np.ndarray:
    """Elementwise maximum over descriptors (MAC-style combination)."""
    if len(descriptors) == 0:
        raise EmptyInputError("mac_pool needs at least one descriptor")
    return np.max(np.stack([np.asarray(d, dtype=np.float64) for d in descriptors]), axis=0)


def l2_normalize_backward(x, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize` at ``x``.

    Returns ``(I - x̂ x̂^T) upstream / ||x||``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    n = np.linalg.norm(x)
    if not n >= ZERO_NORM:
        raise ZeroVectorError("l2_normalize_backward at a zero vector")
    xh = x / n
    return (g - xh * np.dot(xh, g)) / n


def l2_normalize_columns_backward(X, upstream) -> np.ndarray:
    """Column-wise :func:`l2_normalize_backward`."""
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(upstream, dtype=np.float64)
    norms = np.linalg.norm(X, axis=0)
    if np.any(~(norms >= ZERO_NORM)):
        raise ZeroVectorError("l2_normalize_backward at a zero column")
    Xh = X / norms
    return (G - Xh * np.sum(Xh * G, axis=0)) / norms
