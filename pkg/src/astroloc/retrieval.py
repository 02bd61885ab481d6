"""Exact cosine retrieval over a rotation-augmented database and recall@N.

Results are ranked over distinct base images: each base scores the best
similarity among its rotated entries, ties go to the smaller base_id.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, MissingFootprintError, PreconditionError
from .geo import (
    DEFAULT_R_VIS_KM,
    EARTH_RADIUS_KM,
    ROTATIONS,
    Footprint,
    GeoPoint,
    bbox_array,
    bbox_hits,
    footprint_iou,
    footprints_overlap,
)
from .store import EmbeddingRecord, EmbeddingStore

FLOAT32_BYTES = 4
Region = tuple[GeoPoint, float]


def index_memory_bytes(n_base: int, dim: int, augment: bool = True) -> int:
    """Bytes needed to hold the database features as float32."""
    return n_base * (len(ROTATIONS) if augment else 1) * dim * FLOAT32_BYTES


@dataclass(frozen=True)
class RetrievalIndex:
    vectors: np.ndarray  # (entries, dim) float32, grouped by base
    base_ids: tuple[str, ...]  # sorted
    group_starts: np.ndarray  # first entry row of each base
    footprints: tuple[Optional[Footprint], ...]  # per base
    augmented: bool

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_entries(self) -> int:
        return len(self.vectors)

    @property
    def num_base(self) -> int:
        return len(self.base_ids)

    @property
    def nbytes(self) -> int:
        return int(self.vectors.nbytes)

    @cached_property
    def _v64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)

    @cached_property
    def _centroids(self) -> np.ndarray:
        return np.array([fp.centroid.unit_vector() if fp else np.full(3, np.nan) for fp in self.footprints])

    @cached_property
    def _boxes(self) -> np.ndarray:
        return bbox_array(self.footprints)

    def base_mask(self, region: Optional[Region]) -> Optional[np.ndarray]:
        """Bases whose footprint centroid lies inside the visible cap, or None for no filter."""
        if region is None:
            return None
        nadir, r_km = region
        cos_d = np.clip(self._centroids @ nadir.unit_vector(), -1.0, 1.0)
        with np.errstate(invalid="ignore"):
            return EARTH_RADIUS_KM * np.arccos(cos_d) <= r_km


def build_index(store: EmbeddingStore, augment: bool = True) -> RetrievalIndex:
    rots = store.rotations_of
    if not rots:
        raise PreconditionError("store has no database records")
    rows, starts, bases, fps = [], [], [], []
    for base in sorted(rots):
        variants = rots[base]
        if augment:
            missing = [r for r in ROTATIONS if r not in variants]
            if missing:
                raise PreconditionError(f"base {base} lacks rotation variants {missing}")
            chosen = [variants[r] for r in ROTATIONS]
        else:
            chosen = [variants[0] if 0 in variants else variants[min(variants)]]
        starts.append(len(rows))
        rows.extend(chosen)
        bases.append(base)
        fps.append(store.records[chosen[0]].footprint)
    vectors = np.ascontiguousarray(store.vectors[rows])
    vectors.setflags(write=False)
    return RetrievalIndex(vectors, tuple(bases), np.asarray(starts, dtype=np.int64), tuple(fps), augment)


TIE_DECIMALS = 12  # scores equal to this many decimals count as ties


def _rank(index: RetrievalIndex, base_sims: np.ndarray, N: int) -> np.ndarray:
    """Base indices of the top-N scores, ties by ascending base id.

    Scores are compared after rounding so that equal similarities reached
    through different summation orders still tie.
    """
    finite = np.flatnonzero(np.isfinite(base_sims))
    if len(finite) == 0:
        raise PreconditionError("no database entries left after region filtering")
    vals = np.round(base_sims[finite], TIE_DECIMALS)
    if N < len(finite):
        kth = np.partition(vals, len(vals) - N)[len(vals) - N]
        keep = vals >= kth
        finite, vals = finite[keep], vals[keep]
    order = np.lexsort((finite, -vals))
    return finite[order[:N]]


def _base_scores(index: RetrievalIndex, sims: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(sims, index.group_starts, axis=-1)


def search(index: RetrievalIndex, query, N: int, region: Optional[Region] = None) -> list[tuple[str, float]]:
    """Top-N distinct base images by cosine similarity, optionally inside a visible region."""
    if N < 1:
        raise ValueError("N must be at least 1")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise FormatError(f"query dim {q.shape[0]} does not match index dim {index.dim}")
    q = q / np.linalg.norm(q)
    scores = _base_scores(index, index._v64 @ q)
    mask = index.base_mask(region)
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    top = _rank(index, scores, N)
    return [(index.base_ids[i], float(scores[i])) for i in top]


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    num_queries: int
    num_db_base: int
    num_db_augmented: int
    index_bytes: int
    predictions: dict[str, list[str]] = field(repr=False)
    scope: str = "all"
    latency_micros: Optional[dict[str, float]] = field(default=None, repr=False)

    def latency_summary(self) -> Optional[dict]:
        if not self.latency_micros:
            return None
        v = np.array(list(self.latency_micros.values()))
        return {"mean_micros": float(v.mean()), "p95_micros": float(np.percentile(v, 95)),
                "measures": "search only, feature extraction excluded"}

    def to_dict(self, with_predictions: bool = True) -> dict:
        out = {
            "recall_at": {str(n): r for n, r in sorted(self.recall_at.items())},
            "num_queries": self.num_queries,
            "num_db_base": self.num_db_base,
            "num_db_augmented": self.num_db_augmented,
            "index_bytes": self.index_bytes,
            "scope": self.scope,
        }
        if with_predictions:
            out["predictions"] = self.predictions
        return out

    def to_json(self, with_predictions: bool = True) -> str:
        return json.dumps(self.to_dict(with_predictions), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "recall_pct"])
        for n, r in sorted(self.recall_at.items()):
            w.writerow([n, f"{r:.4f}"])
        return buf.getvalue()

    def latency_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "micros"])
        for qid, us in (self.latency_micros or {}).items():
            w.writerow([qid, f"{us:.1f}"])
        return buf.getvalue()


def _correct_bases(index: RetrievalIndex, fp: Footprint, iou_threshold: float) -> set[int]:
    hits = np.flatnonzero(bbox_hits(index._boxes, fp.bbox))
    out = set()
    for i in hits:
        other = index.footprints[i]
        if other is None:
            continue
        ok = footprints_overlap(fp, other) if iou_threshold <= 0 else footprint_iou(fp, other) > iou_threshold
        if ok:
            out.add(int(i))
    return out


def _check(index: RetrievalIndex, queries: Sequence[EmbeddingRecord]) -> None:
    if any(fp is None for fp in index.footprints):
        raise MissingFootprintError("every index entry needs a footprint to score recall")
    for q in queries:
        if q.footprint is None:
            raise MissingFootprintError(f"query {q.id} has no footprint")
        if len(q.vector) != index.dim:
            raise FormatError(f"query {q.id} has dim {len(q.vector)}, index dim is {index.dim}")


def _report(index, queries, Ns, first_hit, predictions, scope, latency=None) -> RecallReport:
    first_hit = np.asarray(first_hit)
    recall = {int(n): float(100.0 * np.mean(first_hit < n)) if len(first_hit) else 0.0 for n in Ns}
    return RecallReport(
        recall_at=recall,
        num_queries=len(queries),
        num_db_base=index.num_base,
        num_db_augmented=index.num_entries,
        index_bytes=index.nbytes,
        predictions=predictions,
        scope=scope,
        latency_micros=latency,
    )


def recall_at_n(index: RetrievalIndex, queries: Sequence[EmbeddingRecord], Ns: Sequence[int] = (1, 10, 100),
                regions: Optional[Sequence[Optional[Region]]] = None, iou_threshold: float = 0.0,
                chunk: int = 256) -> RecallReport:
    """Percentage of queries with a correct (overlapping) base among their top-N.

    ``regions`` optionally gives a visible cap per query to restrict the search to.
    """
    _check(index, queries)
    Ns = sorted(set(int(n) for n in Ns))
    top_n = max(Ns)
    first_hit = []
    predictions = {}
    for start in range(0, len(queries), chunk):
        block = queries[start : start + chunk]
        q = np.stack([np.asarray(r.vector, dtype=np.float64) for r in block])
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        scores = _base_scores(index, q @ index._v64.T)
        for j, rec in enumerate(block):
            row = scores[j]
            region = regions[start + j] if regions is not None else None
            mask = index.base_mask(region)
            if mask is not None:
                row = np.where(mask, row, -np.inf)
            ranked = _rank(index, row, top_n)
            good = _correct_bases(index, rec.footprint, iou_threshold)
            hit = next((r for r, b in enumerate(ranked) if int(b) in good), top_n)
            first_hit.append(hit)
            predictions[rec.id] = [index.base_ids[b] for b in ranked]
    scope = "region" if regions is not None else "all"
    return _report(index, queries, Ns, first_hit, predictions, scope)


def worldwide_eval(index: RetrievalIndex, queries: Sequence[EmbeddingRecord], Ns: Sequence[int] = (1, 10, 100),
                   iou_threshold: float = 0.0) -> RecallReport:
    """Unfiltered search over the whole index, timing each query's search."""
    _check(index, queries)
    Ns = sorted(set(int(n) for n in Ns))
    top_n = max(Ns)
    first_hit, predictions, latency = [], {}, {}
    for rec in queries:
        t0 = time.perf_counter_ns()
        ranked = search(index, rec.vector, top_n)
        latency[rec.id] = (time.perf_counter_ns() - t0) / 1000.0
        names = [b for b, _ in ranked]
        good = {index.base_ids[i] for i in _correct_bases(index, rec.footprint, iou_threshold)}
        first_hit.append(next((r for r, b in enumerate(names) if b in good), top_n))
        predictions[rec.id] = names
    return _report(index, queries, Ns, first_hit, predictions, "world", latency)


def query_regions(queries: Sequence[EmbeddingRecord], r_vis_km: float = DEFAULT_R_VIS_KM) -> list[Region]:
    """Visible caps centred on each query's weak label, or its footprint centroid.

    Stand-in for the nadir point that a real pipeline derives from the photo
    timestamp and the station's orbit.
    """
    out = []
    for q in queries:
        centre = q.weak or (q.footprint.centroid if q.footprint else None)
        if centre is None:
            raise MissingFootprintError(f"query {q.id} has neither weak label nor footprint")
        out.append((centre, r_vis_km))
    return out
