"""Retrieval metrics and square-rooted PCA whitening."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import l2_normalize_columns
from .errors import FileFormatError, IndexOutOfRangeError, InvalidParameterError, NoQueriesError, RankDeficientError

EIG_FLOOR = 1e-10
METRIC_COLUMNS = ("metric", "split", "value")


def average_precision(relevance) -> float | None:
    """Non-interpolated AP of one ranked relevance list; ``None`` without positives."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return None
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(np.arange(1, n_rel + 1) / ranks))


def mean_average_precision(relevances, return_excluded: bool = False):
    """Mean of per-query AP over queries that have at least one relevant item.

    Raises:
        NoQueriesError: if no query has a relevant item.
    """
    aps = [average_precision(r) for r in relevances]
    kept = [a for a in aps if a is not None]
    if not kept:
        raise NoQueriesError("no query with a relevant item")
    value = float(np.mean(kept))
    if return_excluded:
        return value, len(aps) - len(kept)
    return value


def mean_precision_at_k(relevances, k: int = 10) -> float:
    """Mean fraction of relevant items among the top ``k`` (short lists count as padded)."""
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    rows = list(relevances)
    if not rows:
        raise NoQueriesError("no queries")
    return float(np.mean([np.count_nonzero(np.asarray(r, dtype=bool)[:k]) / k for r in rows]))


def rank_database(queries, database) -> np.ndarray:
    """Database indices per query by decreasing cosine similarity.

    Inputs are normalized ``(dim, count)`` matrices. Ties go to the lower
    database index.
    """
    sims = np.asarray(queries).T @ np.asarray(database)
    return np.argsort(-sims, axis=1, kind="stable")


@dataclass
class RetrievalGroundTruth:
    """Relevant database indices per query id."""

    relevant: dict[int, list[int]]
    split: str = "all"

    def validate(self, num_queries: int, num_database: int) -> "RetrievalGroundTruth":
        for q, rel in self.relevant.items():
            if not 0 <= q < num_queries:
                raise IndexOutOfRangeError(f"ground-truth query {q} outside 0..{num_queries - 1}")
            if len(set(rel)) != len(rel):
                raise FileFormatError(f"duplicate relevant ids for query {q}")
            if rel and (min(rel) < 0 or max(rel) >= num_database):
                raise IndexOutOfRangeError(f"relevant id of query {q} outside the database")
        return self

    def relevance(self, ranking: np.ndarray) -> list[np.ndarray]:
        out = []
        for q in range(ranking.shape[0]):
            rel = np.zeros(ranking.shape[1], dtype=bool)
            rel[self.relevant.get(q, [])] = True
            out.append(rel[ranking[q]])
        return out

    @classmethod
    def from_labels(cls, query_labels, database_labels, split: str = "all") -> "RetrievalGroundTruth":
        db = np.asarray(database_labels)
        return cls({q: np.flatnonzero(db == lab).tolist() for q, lab in enumerate(query_labels)}, split)


def write_ground_truth(path, gt: RetrievalGroundTruth) -> None:
    lines = [f"# split: {gt.split}"]
    for q in sorted(gt.relevant):
        lines.append(f"{q}: " + " ".join(str(i) for i in gt.relevant[q]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ground_truth(path) -> RetrievalGroundTruth:
    """Parse ``query_id: rel_id rel_id ...`` lines; ``# split: name`` sets the split tag."""
    relevant: dict[int, list[int]] = {}
    split = "all"
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("split:"):
                split = body.split(":", 1)[1].strip() or "all"
            continue
        head, sep, tail = line.partition(":")
        if not sep:
            raise FileFormatError(f"{path}:{lineno}: expected 'query_id: ids'")
        try:
            q = int(head)
            ids = [int(t) for t in tail.split()]
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from None
        if q in relevant:
            raise FileFormatError(f"{path}:{lineno}: query {q} listed twice")
        relevant[q] = ids
    return RetrievalGroundTruth(relevant, split)


def evaluate(queries, database, gt: RetrievalGroundTruth, k: int = 10) -> dict[str, float]:
    """mAP and mP@k of a normalized query/database pair."""
    ranking = rank_database(queries, database)
    rel = gt.relevance(ranking)
    value, excluded = mean_average_precision(rel, return_excluded=True)
    with_pos = [r for r in rel if r.any()]
    return {"mAP": value, f"mP@{k}": mean_precision_at_k(with_pos, k), "excluded_queries": excluded}


@dataclass
class WhitenModel:
    """Centering plus projection ``diag(eigval^-1/2) V^T`` onto the top components."""

    mean: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]


def fit_whitening(train, out_dim: int | None = None) -> WhitenModel:
    """Learn square-rooted PCA whitening on ``(dim, count)`` training columns.

    Raises:
        RankDeficientError: fewer than ``out_dim`` eigenvalues above 1e-10.
    """
    X = np.asarray(train, dtype=np.float64)
    dim, n = X.shape
    out_dim = dim if out_dim is None else out_dim
    if not 1 <= out_dim <= dim:
        raise InvalidParameterError(f"out_dim must be in 1..{dim}, got {out_dim}")
    if n <= out_dim:
        raise InvalidParameterError(f"need more than {out_dim} training vectors, got {n}")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    cov = Xc @ Xc.T / n
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if np.count_nonzero(evals > EIG_FLOOR) < out_dim:
        raise RankDeficientError(f"only {np.count_nonzero(evals > EIG_FLOOR)} usable components, need {out_dim}")
    evals, evecs = evals[:out_dim], evecs[:, :out_dim]
    # fix eigenvector sign for reproducibility across LAPACK builds
    evecs = evecs * np.where(evecs[np.abs(evecs).argmax(axis=0), range(out_dim)] < 0, -1.0, 1.0)
    return WhitenModel(mean, (evecs / np.sqrt(evals)).T, evals)


def apply_whitening(model: WhitenModel, X, normalize: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Z = model.projection @ (X - model.mean[:, None])
    return l2_normalize_columns(Z) if normalize else Z


def write_metrics_csv(path, rows) -> None:
    """Rows are ``(metric, split, value)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for metric, split, value in rows:
            w.writerow([metric, split, repr(float(value))])
