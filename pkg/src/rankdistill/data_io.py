"""File formats, manifests, the synthetic embedding world and teacher accounting.

Embedding file (``.rdem``), little endian::

    offset  size  field
    0       4     magic b"RDEM"
    4       4     u32 format version (1)
    8       4     u32 dim
    12      4     u32 count
    16      4     u32 dtype code (1 = float32)
    20      ...   count * dim float32, column after column

Checkpoint file (``.rdck``), little endian::

    magic b"RDCK", u32 version, u32 number of tensors, then per tensor:
    u16 name length, utf-8 name, u8 ndim, ndim * u32 shape, float64 payload

Each checkpoint has a JSON sidecar ``<file>.json`` with the epoch tag and
the configuration hash.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingMatrix, gem_pool, l2_normalize_columns, mac_pool
from .errors import (
    BadMagicError,
    DimMismatchError,
    FileFormatError,
    InfeasibleSpecError,
    InvalidParameterError,
    TruncatedPayloadError,
)

EMBEDDING_MAGIC = b"RDEM"
CHECKPOINT_MAGIC = b"RDCK"
FORMAT_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIII")


# -- embedding files ---------------------------------------------------------

def write_embedding_file(path, data) -> None:
    """Write a ``(dim, count)`` matrix as float32."""
    if isinstance(data, EmbeddingMatrix):
        data = data.data
    data = np.asarray(data)
    if data.ndim != 2:
        raise DimMismatchError(f"expected a (dim, count) matrix, got shape {data.shape}")
    dim, count = data.shape
    payload = np.ascontiguousarray(data.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, dim, count, DTYPE_F32))
        fh.write(payload)


def read_embedding_file(path, dim: int | None = None, as_float64: bool = True) -> np.ndarray:
    """Read an embedding file into a ``(dim, count)`` array.

    Raises:
        BadMagicError: wrong file signature.
        TruncatedPayloadError: fewer payload bytes than the header announces.
        DimMismatchError: ``dim`` given and different from the stored one.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than its header")
    magic, version, fdim, count, dtype = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION or dtype != DTYPE_F32:
        raise FileFormatError(f"{path}: unsupported version {version} / dtype code {dtype}")
    if dim is not None and fdim != dim:
        raise DimMismatchError(f"{path}: stored dim {fdim}, expected {dim}")
    expected = 4 * fdim * count
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(body)} bytes, header claims {expected}")
    if len(body) > expected:
        raise FileFormatError(f"{path}: {len(body) - expected} trailing bytes after the payload")
    arr = np.frombuffer(body, dtype="<f4").reshape(count, fdim).T
    return arr.astype(np.float64) if as_float64 else arr.copy()


# -- checkpoints ---------------------------------------------------------------

def write_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    try:
        _, version, n = struct.unpack_from("<4sII", raw)
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        params = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = 8 * int(np.prod(shape))
            if pos + size > len(raw):
                raise TruncatedPayloadError(f"{path}: tensor {name!r} is truncated")
            params[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise TruncatedPayloadError(f"{path}: truncated header") from exc
    return params


def read_checkpoint_meta(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())


# -- manifests -------------------------------------------------------------------

ROLES = ("teacher", "student-raw", "query", "database", "whiten")


@dataclass
class Manifest:
    """Paths of a dataset, relative to the manifest's own directory on disk.

    Roles: ``teacher`` (training-set teacher embeddings), ``student-raw``
    (training-set student inputs), ``query`` / ``database`` (student inputs
    of the evaluation split), ``whiten`` (student inputs of a set disjoint
    from the evaluation split, used to learn whitening).
    """

    files: dict[str, str]
    ground_truth: str | None = None
    world: dict | None = None
    root: Path = field(default=Path("."), repr=False)

    def path(self, role: str) -> Path:
        if role not in self.files:
            raise KeyError(f"manifest has no {role!r} entry")
        return self.root / self.files[role]

    def has(self, role: str) -> bool:
        return role in self.files

    def ground_truth_path(self) -> Path:
        if not self.ground_truth:
            raise FileNotFoundError("manifest does not list a ground-truth file")
        return self.root / self.ground_truth

    def to_json(self) -> dict:
        return {
            "format": "rankdistill-manifest",
            "version": FORMAT_VERSION,
            "files": [{"role": r, "path": p} for r, p in self.files.items()],
            "ground_truth": self.ground_truth,
            "world": self.world,
        }


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "rankdistill-manifest":
        raise FileFormatError(f"{path}: not a manifest")
    files = {}
    for entry in doc.get("files", []):
        role = entry["role"]
        if role not in ROLES:
            raise FileFormatError(f"{path}: unknown role {role!r}")
        files[role] = entry["path"]
    return Manifest(files, doc.get("ground_truth"), doc.get("world"), path.parent)


# -- synthetic world ---------------------------------------------------------------

@dataclass(frozen=True)
class WorldSpec:
    """Clustered embedding world.

    Members are ``normalize(center + e)`` with isotropic ``e`` of total
    variance ``1 / kappa`` (so concentration does not depend on the
    dimension). Student inputs are teacher embeddings zero-padded or
    truncated to ``student_input_dim`` plus per-coordinate noise of scale
    ``sigma``; with ``scales > 1`` several independent noisy views are
    combined with GeM (``pool_p``) or MAC pooling.
    """

    num_clusters: int = 20
    samples_per_cluster: int = 100
    teacher_dim: int = 64
    student_input_dim: int = 64
    kappa: float = 50.0
    sigma: float = 0.1
    nn_cap: int | None = None
    nn_tau: float = 0.75
    scales: int = 1
    pooling: str = "gem"
    pool_p: float = 1.0
    seed: int = 0
    max_attempts: int = 10_000

    def validate(self) -> "WorldSpec":
        bad = []
        for name in ("num_clusters", "samples_per_cluster", "teacher_dim", "student_input_dim", "scales"):
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        if not self.kappa > 0:
            bad.append("kappa must be > 0")
        if self.sigma < 0:
            bad.append("sigma must be >= 0")
        if self.nn_cap is not None and self.nn_cap < 0:
            bad.append("nn_cap must be >= 0")
        if self.pooling not in ("gem", "mac"):
            bad.append("pooling must be 'gem' or 'mac'")
        if bad:
            raise InvalidParameterError("; ".join(bad))
        return self


@dataclass
class World:
    teacher: np.ndarray
    student_raw: np.ndarray
    labels: np.ndarray
    spec: WorldSpec

    @property
    def size(self) -> int:
        return self.labels.size


def _members(centers, labels, kappa, rng):
    dim = centers.shape[0]
    noise = rng.normal(0.0, 1.0 / np.sqrt(kappa * dim), (dim, labels.size))
    return l2_normalize_columns(centers[:, labels] + noise)


def neighbor_counts(teacher: np.ndarray, tau: float) -> np.ndarray:
    """Number of other samples with teacher similarity above ``tau``."""
    S = teacher.T @ teacher
    np.fill_diagonal(S, -np.inf)
    return (S > tau).sum(axis=1)


def _student_view(teacher, spec: WorldSpec, rng):
    M, dim = spec.student_input_dim, teacher.shape[0]
    base = np.zeros((M, teacher.shape[1]))
    base[:min(M, dim)] = teacher[:min(M, dim)]
    views = [base + rng.normal(0.0, spec.sigma, base.shape) for _ in range(spec.scales)]
    if spec.scales == 1:
        return views[0]
    if spec.pooling == "mac":
        return mac_pool(views)
    return gem_pool(views, spec.pool_p)


def generate_world(spec: WorldSpec) -> World:
    """Sample a clustered world; deterministic for a given ``spec.seed``.

    With ``nn_cap`` set, samples with more than ``nn_cap`` teacher neighbours
    above ``nn_tau`` are redrawn until none remain.

    Raises:
        InfeasibleSpecError: the neighbour cap could not be met within
            ``max_attempts`` redraw rounds.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dim = spec.teacher_dim
    centers = l2_normalize_columns(rng.normal(size=(dim, spec.num_clusters)))
    labels = np.repeat(np.arange(spec.num_clusters), spec.samples_per_cluster)
    teacher = _members(centers, labels, spec.kappa, rng)
    if spec.nn_cap is not None:
        for _ in range(spec.max_attempts):
            bad = np.flatnonzero(neighbor_counts(teacher, spec.nn_tau) > spec.nn_cap)
            if bad.size == 0:
                break
            teacher[:, bad] = _members(centers, labels[bad], spec.kappa, rng)
        else:
            raise InfeasibleSpecError(
                f"could not cap neighbours at {spec.nn_cap} after {spec.max_attempts} attempts"
            )
    student = _student_view(teacher, spec, rng)
    return World(teacher, student, labels, spec)


def split_world(world: World, train_size: int, num_queries: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Disjoint index sets ``train`` / ``query`` / ``database``."""
    n = world.size
    if train_size < 2 or num_queries < 1 or train_size + num_queries >= n:
        raise InvalidParameterError(f"cannot split {n} samples into {train_size} train + {num_queries} queries")
    order = np.random.default_rng(seed).permutation(n)
    return {
        "train": np.sort(order[:train_size]),
        "query": np.sort(order[train_size:train_size + num_queries]),
        "database": np.sort(order[train_size + num_queries:]),
    }


def world_spec_dict(spec: WorldSpec) -> dict:
    return asdict(spec)


# -- teacher accounting ----------------------------------------------------------

class TeacherQueryCounter:
    """Count distinct samples sent to a black-box teacher.

    ``source`` is a ``(N_T, n)`` array or a callable mapping an index array to
    the corresponding columns. Repeated indices are served from a cache and
    do not count again.
    """

    def __init__(self, source):
        self._source = source
        self._cache: dict[int, np.ndarray] = {}
        self.calls = 0

    @property
    def count(self) -> int:
        return len(self._cache)

    def _fetch(self, idx: np.ndarray) -> np.ndarray:
        if callable(self._source):
            return np.asarray(self._source(idx), dtype=np.float64)
        return np.asarray(self._source, dtype=np.float64)[:, idx]

    def query(self, indices) -> np.ndarray:
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        missing = [int(i) for i in dict.fromkeys(indices.tolist()) if int(i) not in self._cache]
        if missing:
            self.calls += 1
            cols = self._fetch(np.asarray(missing))
            for j, i in enumerate(missing):
                self._cache[i] = cols[:, j]
        return np.stack([self._cache[int(i)] for i in indices], axis=1)


def teacher_query_counter(source) -> TeacherQueryCounter:
    return TeacherQueryCounter(source)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def relpath(path, start) -> str:
    return os.path.relpath(path, start)
