"""Embedding records, the AEM1 binary container, and the synthetic desk-scale dataset.

AEM1 layout (little-endian)::

    b"AEM1" | u32 version=1 | u32 count | u32 dim
    count*dim float32, row-major
    metadata trailer: one JSON object per line, one line per record
    u64 byte offset of the trailer
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import AstroLocError, FormatError, NumericError, PreconditionError
from .geo import ROTATIONS, Footprint, GeoPoint

MAGIC = b"AEM1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_OFFSET = struct.Struct("<Q")
KINDS = ("query", "db")
NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    kind: str
    vector: np.ndarray = field(repr=False, compare=False)
    base_id: Optional[str] = None
    rotation: int = 0
    footprint: Optional[Footprint] = None
    zoom: Optional[int] = None
    weak: Optional[GeoPoint] = None
    timestamp: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"record {self.id}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.rotation not in ROTATIONS:
            raise FormatError(f"record {self.id}: rotation must be one of {ROTATIONS}")
        if self.base_id is None:
            object.__setattr__(self, "base_id", self.id)
        if self.rotation == 0 and self.base_id != self.id:
            raise FormatError(f"record {self.id}: un-rotated record must be its own base")

    def metadata(self) -> dict:
        return {
            "id": self.id,
            "base_id": self.base_id,
            "rotation": self.rotation,
            "kind": self.kind,
            "footprint": self.footprint.to_latlon() if self.footprint else None,
            "zoom": self.zoom,
            "weak": [self.weak.lat, self.weak.lon] if self.weak else None,
            "timestamp": self.timestamp,
        }


def _unit_rows(vectors: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise FormatError(f"expected a 2-D vector matrix, got shape {vectors.shape}")
    finite = np.isfinite(vectors).all(axis=1)
    if not finite.all():
        bad = ids[int(np.flatnonzero(~finite)[0])]
        raise NumericError(f"record {bad}: vector contains NaN or Inf")
    v64 = vectors.astype(np.float64)
    norms = np.linalg.norm(v64, axis=1)
    if (norms == 0).any():
        bad = ids[int(np.flatnonzero(norms == 0)[0])]
        raise NumericError(f"record {bad}: zero vector")
    # keep already-normalized float32 rows bit-identical
    if vectors.dtype == np.float32 and np.all(np.abs(norms - 1.0) <= NORM_TOL):
        return np.ascontiguousarray(vectors)
    return (v64 / norms[:, None]).astype(np.float32)


class EmbeddingStore:
    """Immutable set of unit-norm embeddings with per-record metadata.

    ``vectors`` is the (n, dim) float32 matrix; row i belongs to ``records[i]``.
    """

    def __init__(self, dim: int, records: Iterable[EmbeddingRecord] = ()):
        records = list(records)
        if dim <= 0:
            raise FormatError(f"dim must be positive, got {dim}")
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise FormatError("record ids are not unique")
        if records:
            mat = np.stack([np.asarray(r.vector).reshape(-1) for r in records])
            if mat.shape[1] != dim:
                raise FormatError(f"vectors have dim {mat.shape[1]}, store dim is {dim}")
            mat = _unit_rows(mat, ids)
        else:
            mat = np.zeros((0, dim), dtype=np.float32)
        mat.setflags(write=False)
        self.dim = dim
        self.vectors = mat
        self.records = tuple(_with_vector(r, mat[i]) for i, r in enumerate(records))

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.vectors, other.vectors)
            and [r.metadata() for r in self.records] == [r.metadata() for r in other.records]
        )

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {r.id: i for i, r in enumerate(self.records)}

    def indices(self, kind: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.kind == kind], dtype=np.int64)

    @cached_property
    def query_indices(self) -> np.ndarray:
        return self.indices("query")

    @cached_property
    def db_indices(self) -> np.ndarray:
        return self.indices("db")

    @cached_property
    def rotations_of(self) -> dict[str, dict[int, int]]:
        """base_id -> {rotation: row} over db records."""
        out: dict[str, dict[int, int]] = {}
        for i in self.db_indices:
            r = self.records[i]
            out.setdefault(r.base_id, {})[r.rotation] = int(i)
        return out

    def record(self, rid: str) -> EmbeddingRecord:
        return self.records[self.index_of[rid]]

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingStore":
        """Same records, new vectors (renormalized)."""
        if vectors.shape != self.vectors.shape:
            raise FormatError(f"expected shape {self.vectors.shape}, got {vectors.shape}")
        mat = _unit_rows(vectors, [r.id for r in self.records])
        return EmbeddingStore(self.dim, [_with_vector(r, mat[i]) for i, r in enumerate(self.records)])


def _with_vector(r: EmbeddingRecord, v: np.ndarray) -> EmbeddingRecord:
    return EmbeddingRecord(
        id=r.id, kind=r.kind, vector=v, base_id=r.base_id, rotation=r.rotation,
        footprint=r.footprint, zoom=r.zoom, weak=r.weak, timestamp=r.timestamp,
    )


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FormatError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --- AEM1 I/O ----------------------------------------------------------------


def record_from_metadata(meta: dict, vector: np.ndarray) -> EmbeddingRecord:
    try:
        fp = meta.get("footprint")
        weak = meta.get("weak")
        return EmbeddingRecord(
            id=str(meta["id"]),
            kind=meta["kind"],
            vector=vector,
            base_id=meta.get("base_id"),
            rotation=int(meta.get("rotation", 0)),
            footprint=Footprint.from_latlon(fp) if fp else None,
            zoom=meta.get("zoom"),
            weak=GeoPoint(*weak) if weak else None,
            timestamp=meta.get("timestamp"),
        )
    except KeyError as e:
        raise FormatError(f"metadata missing field {e}") from e


def write_aem(fh, vectors: np.ndarray, metadata: Sequence[dict]) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    count, dim = vectors.shape
    start = fh.tell()
    fh.write(_HEADER.pack(MAGIC, VERSION, count, dim))
    fh.write(vectors.tobytes())
    trailer_at = fh.tell() - start
    for meta in metadata:
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    fh.write(_OFFSET.pack(trailer_at))


def read_aem(data: bytes) -> tuple[np.ndarray, list[dict]]:
    if len(data) < _HEADER.size + _OFFSET.size:
        raise FormatError("truncated file: shorter than header")
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    payload_end = _HEADER.size + 4 * count * dim
    (trailer_at,) = _OFFSET.unpack_from(data, len(data) - _OFFSET.size)
    if payload_end > len(data) - _OFFSET.size or trailer_at != payload_end:
        raise FormatError(f"truncated payload: {count}x{dim} floats end at byte {payload_end}, "
                          f"trailer offset says {trailer_at}, file has {len(data)} bytes")
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size).reshape(count, dim)
    lines = data[trailer_at : len(data) - _OFFSET.size].splitlines()
    if len(lines) != count:
        raise FormatError(f"metadata trailer has {len(lines)} lines for {count} records")
    try:
        metadata = [json.loads(line) for line in lines]
    except json.JSONDecodeError as e:
        raise FormatError(f"bad metadata trailer: {e}") from e
    return vectors.astype(np.float32), metadata


def save_store(store: EmbeddingStore, path) -> None:
    buf = io.BytesIO()
    write_aem(buf, store.vectors, [r.metadata() for r in store.records])
    Path(path).write_bytes(buf.getvalue())


def load_store(path) -> EmbeddingStore:
    vectors, metadata = read_aem(Path(path).read_bytes())
    ids = [str(m.get("id")) for m in metadata]
    vectors = _unit_rows(vectors, ids) if len(ids) else vectors
    records = []
    for i, m in enumerate(metadata):
        try:
            records.append(record_from_metadata(m, vectors[i]))
        except AstroLocError as e:
            raise type(e)(f"{path}: metadata line {i + 1}: {e}") from e
    return EmbeddingStore(vectors.shape[1], records)


# --- synthetic data ------------------------------------------------------------

CELL_DEG = 1.0
GRID_STEP_DEG = 2.0
GRID_LAT_LIMIT = 60.0
JITTER = 0.15  # max footprint shift inside a cell, as a fraction of the cell
DB_NOISE_RATIO = 0.5  # db vectors sit this much closer to the prototype than queries


def _grid_cells() -> list[tuple[float, float]]:
    lats = np.arange(-GRID_LAT_LIMIT, GRID_LAT_LIMIT, GRID_STEP_DEG)
    lons = np.arange(-179.0, 179.0 - CELL_DEG + 1e-9, GRID_STEP_DEG)
    return [(float(a), float(b)) for a in lats for b in lons]


def synth_dataset(
    n_locations: int,
    db_per_location: int,
    queries_per_location: int,
    dim: int,
    noise_sigma: float,
    seed: int,
) -> EmbeddingStore:
    """Deterministic toy world of separated locations with noisy embeddings.

    Each location is a 1-degree cell on a 2-degree grid (cells never touch).
    Every location gets a random unit prototype; each db image contributes
    four rotation records at ``prototype + (noise_sigma / 2) * N(0, I)`` and
    each query sits at ``prototype + noise_sigma * N(0, I)``, all normalized.
    Footprints inside a cell are jittered copies of the cell, so every query
    overlaps every db image of its own location (IoU >= 0.49 / 1.51, about 0.32,
    above the 0.2 pairing threshold) and nothing else.
    """
    if min(n_locations, db_per_location, queries_per_location, dim) <= 0:
        raise PreconditionError("counts and dim must be positive")
    if noise_sigma < 0:
        raise PreconditionError("noise_sigma must be non-negative")
    cells = _grid_cells()
    if n_locations > len(cells):
        raise PreconditionError(f"grid capacity exceeded: {n_locations} > {len(cells)} locations")
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(cells))[:n_locations]
    protos = rng.standard_normal((n_locations, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def jittered(south, west):
        dx, dy = rng.uniform(-JITTER, JITTER, size=2) * CELL_DEG
        return Footprint.from_bounds(south + dy, west + dx, south + dy + CELL_DEG, west + dx + CELL_DEG)

    def noisy(proto, sigma):
        v = proto + sigma * rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    records = []
    width = len(str(n_locations - 1))
    for loc, cell in enumerate(chosen):
        south, west = cells[cell]
        tag = f"{loc:0{width}d}"
        for j in range(db_per_location):
            fp = jittered(south, west)
            base = f"db{tag}_{j}"
            for rot in ROTATIONS:
                rid = base if rot == 0 else f"{base}_r{rot}"
                records.append(EmbeddingRecord(
                    id=rid, kind="db", vector=noisy(protos[loc], DB_NOISE_RATIO * noise_sigma),
                    base_id=base, rotation=rot, footprint=fp, zoom=9,
                ))
        for j in range(queries_per_location):
            fp = jittered(south, west)
            records.append(EmbeddingRecord(
                id=f"q{tag}_{j}", kind="query", vector=noisy(protos[loc], noise_sigma),
                footprint=fp, weak=fp.centroid,
            ))
    return EmbeddingStore(dim, records)
