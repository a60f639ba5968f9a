"""Histogram-quantized Average Precision loss with an analytic backward pass.

Similarities in ``[-1, 1]`` are softly assigned to ``C`` bins with centers
``c_b = 1 - b * delta`` (``b = 0 .. C-1``, ``delta = 2 / (C - 1)``) through a
triangular kernel. Because the kernel support is one bin width, every score
lands in at most two neighbouring bins, so histograms are built with
``bincount`` over (query, bin) keys instead of a dense (Z, C, Z) tensor.

Per query ``q`` with ``N_q`` positives (the query itself is never a candidate):

    h_b   = sum_i p(s_qi, b)            hp_b = sum_i p(s_qi, b) y_qi
    Pr_b  = cumsum(hp)_b / cumsum(h)_b  dRc_b = hp_b / N_q
    AP(q) = sum_b Pr_b dRc_b

and the loss is the mean of ``1 - AP(q)`` over queries with ``N_q > 0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllQueriesEmptyError,
    InvalidParameterError,
    LengthMismatchError,
    MissingCacheError,
    ShapeMismatchError,
)
from .mixup import MixRecord

RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class APLossConfig:
    num_bins: int = 20

    def __post_init__(self):
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise InvalidParameterError(f"need at least 2 bins, got {self.num_bins}")

    @property
    def delta(self) -> float:
        return 2.0 / (self.num_bins - 1)

    @property
    def centers(self) -> np.ndarray:
        return 1.0 - np.arange(self.num_bins) * self.delta


@dataclass
class APLossResult:
    """Forward output plus whatever the backward pass needs.

    ``per_query_ap`` is NaN for queries without positives; ``valid`` marks the
    queries that enter the loss.
    """

    loss: float
    per_query_ap: np.ndarray
    valid: np.ndarray
    cache: dict | None = field(default=None, repr=False)
    grad_similarity: np.ndarray | None = field(default=None, repr=False)
    grad_embeddings: np.ndarray | None = field(default=None, repr=False)


def _clip_scores(s: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Clamp to ``[-1, 1]``; the mask of clamped entries is ``None`` if nothing moved."""
    mag = np.abs(s)
    peak = mag.max(initial=0.0)
    if peak <= 1.0:
        return s, None
    if peak > 1.0 + RANGE_SLACK:
        warnings.warn("similarities outside [-1, 1] were clamped", RuntimeWarning, stacklevel=3)
    return np.clip(s, -1.0, 1.0), mag > 1.0


def soft_bin_assignment(s: float, b: int, cfg: APLossConfig) -> float:
    """Triangular kernel ``max(1 - |s - c_b| / delta, 0)`` for 0-based bin ``b``."""
    s, _ = _clip_scores(np.asarray(s, dtype=np.float64))
    c = 1.0 - b * cfg.delta
    return float(np.maximum(1.0 - np.abs(s - c) / cfg.delta, 0.0))


def soft_bins(s, cfg: APLossConfig) -> np.ndarray:
    """Dense assignment of every score to every bin, shape ``s.shape + (C,)``."""
    s, _ = _clip_scores(np.asarray(s, dtype=np.float64))
    return np.maximum(1.0 - np.abs(s[..., None] - cfg.centers) / cfg.delta, 0.0)


def _bin_coordinates(S: np.ndarray, cfg: APLossConfig):
    """Lower bin index, its weight, and the kink mask for every score."""
    Sc, outside = _clip_scores(S)
    u = np.subtract(1.0, Sc)
    u /= cfg.delta
    # u >= 0, so truncation is floor
    lo = u.astype(np.int64)
    np.minimum(lo, cfg.num_bins - 2, out=lo)
    frac = u
    frac -= lo
    kink = frac == 0.0
    kink |= frac == 1.0
    if outside is not None:
        kink |= outside
    return lo, frac, kink


def _keys(lo: np.ndarray, Y: np.ndarray, C: int) -> np.ndarray:
    """Flat index of (query, lower bin, label) into a ``(Z, C, 2)`` table."""
    Z = lo.shape[0]
    key = lo + (np.arange(Z, dtype=np.int64) * C)[:, None]
    key *= 2
    key += Y
    return key.ravel()


def quantized_ap(S_row, Y_row, cfg: APLossConfig, query: int | None = None):
    """Quantized AP of a single ranking row.

    ``query`` (if given) is removed from the candidates. Returns ``None`` when
    the row has no positives: such a query carries neither loss nor gradient.
    """
    S_row = np.asarray(S_row, dtype=np.float64)
    Y_row = np.asarray(Y_row, dtype=np.float64)
    if S_row.shape != Y_row.shape or S_row.ndim != 1:
        raise LengthMismatchError(f"score and label rows differ: {S_row.shape} vs {Y_row.shape}")
    keep = np.ones(S_row.size, dtype=bool)
    if query is not None:
        keep[query] = False
    p = soft_bins(S_row[keep], cfg)
    y = Y_row[keep]
    n_pos = y.sum()
    if n_pos == 0:
        return None
    hp = p.T @ y
    h = p.sum(axis=0)
    H = np.cumsum(h)
    Hp = np.cumsum(hp)
    pr = np.divide(Hp, H, out=np.zeros_like(H), where=H > 0)
    return float(np.sum(pr * hp / n_pos))


def ap_loss_forward(S_S, Y, cfg: APLossConfig) -> APLossResult:
    """Batch loss over all queries of a square score matrix.

    Raises:
        AllQueriesEmptyError: if no query has a positive.
    """
    S = np.asarray(S_S, dtype=np.float64)
    Y = np.asarray(Y)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or Y.shape != S.shape:
        raise ShapeMismatchError(f"similarity {S.shape} and label {Y.shape} must be equal squares")
    Z = S.shape[0]
    C = cfg.num_bins

    Yi = Y.astype(np.int64)
    if Yi.size and (Yi.min() < 0 or Yi.max() > 1):
        raise InvalidParameterError("labels must be 0/1")
    np.fill_diagonal(Yi, 0)
    n_pos = Yi.sum(axis=1).astype(np.float64)
    valid = n_pos > 0
    if not valid.any():
        raise AllQueriesEmptyError("every query has an empty positive set")

    lo, frac, kink = _bin_coordinates(S, cfg)
    w_hi = frac
    w_lo = np.subtract(1.0, frac)
    np.fill_diagonal(w_lo, 0.0)
    np.fill_diagonal(w_hi, 0.0)
    key = _keys(lo, Yi, C)
    size = 2 * Z * C
    # moving one bin down is +2 in the (query, bin, label) layout
    mass = (np.bincount(key, w_lo.ravel(), size) + np.bincount(key + 2, w_hi.ravel(), size)).reshape(Z, C, 2)
    hp = mass[:, :, 1]
    h = mass[:, :, 0] + hp
    H = np.cumsum(h, axis=1)
    Hp = np.cumsum(hp, axis=1)
    occupied = H > 0
    pr = np.divide(Hp, H, out=np.zeros_like(H), where=occupied)
    N = np.where(valid, n_pos, 1.0)[:, None]
    ap = np.sum(pr * hp / N, axis=1)

    n_valid = int(valid.sum())
    loss = float(np.sum(1.0 - ap[valid]) / n_valid)
    per_query = np.where(valid, ap, np.nan)
    cache = dict(
        key=key, kink=kink, h=h, hp=hp, H=H, Hp=Hp, pr=pr,
        N=N, valid=valid, n_valid=n_valid, cfg=cfg, Z=Z,
    )
    return APLossResult(loss, per_query, valid, cache)


def _rev_cumsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[:, ::-1], axis=1)[:, ::-1]


def similarity_gradient(result: APLossResult) -> np.ndarray:
    """``dL/dS`` for the forward pass stored in ``result``.

    The kernel slope is ``+-1/delta`` inside its support and is taken as zero
    exactly at bin centers (the kinks).
    """
    c = result.cache
    if c is None:
        raise MissingCacheError("forward cache is missing")
    if result.grad_similarity is not None:
        return result.grad_similarity
    H, Hp, hp, pr, N = c["H"], c["Hp"], c["hp"], c["pr"], c["N"]
    occupied = H > 0
    safe_H = np.where(occupied, H, 1.0)
    a = np.where(occupied, hp / (N * safe_H), 0.0)
    bterm = np.where(occupied, Hp * hp / (N * safe_H**2), 0.0)
    d_hp = pr / N + _rev_cumsum(a)
    d_h = -_rev_cumsum(bterm)

    # dLoss/dp for (query, bin), split into the part shared by all candidates and
    # the extra part for positives
    scale = np.where(c["valid"], -1.0 / c["n_valid"], 0.0)[:, None]
    table = np.empty(d_h.shape + (2,))
    table[:, :, 0] = scale * d_h
    table[:, :, 1] = scale * (d_h + d_hp)
    flat = table.ravel()
    key = c["key"]
    Z = c["Z"]
    G = (flat[key] - flat[key + 2]).reshape(Z, Z)
    G *= 1.0 / c["cfg"].delta
    G[c["kink"]] = 0.0
    np.fill_diagonal(G, 0.0)
    result.grad_similarity = G
    return G


def ap_loss_backward(result: APLossResult, F_S, mix: MixRecord | None = None, stop_grad: bool = True) -> np.ndarray:
    """Gradient of the loss with respect to the joint normalized student columns.

    ``S = F^T F`` gives ``dL/dF = F (G + G^T)``. When ``mix`` is given and
    ``stop_grad`` holds, mixed columns are constants: their block of the
    returned ``(dim, Z)`` gradient is exactly zero, while originals still
    receive the signal from their similarities to mixed columns.
    """
    G = similarity_gradient(result)
    F = np.asarray(F_S, dtype=np.float64)
    if F.shape[1] != G.shape[0]:
        raise ShapeMismatchError(f"{F.shape[1]} embeddings for a {G.shape[0]}-sample loss")
    grad = F @ (G + G.T)
    if mix is not None and stop_grad:
        grad[:, mix.batch_size:] = 0.0
    result.grad_embeddings = grad
    return grad
