"""Database clustering, query-weighted cluster sampling and batch construction.

Clusters are computed on database images only (one vector per base image,
its un-rotated record); training queries are merely assigned to the
nearest centroid to weight how often each cluster feeds the MUM loss.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    CannotFillBatchError,
    FormatError,
    InsufficientClusterError,
    MissingFootprintError,
    PreconditionError,
)
from .geo import ROTATIONS, Footprint, bbox_array, bbox_hits, footprint_iou, footprints_overlap
from .losses import PairBatch, QuadBatch
from .store import EmbeddingStore, read_aem, write_aem


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    member_ids: list[str]
    seed: int
    inertia_history: list[float] = field(default_factory=list)
    bins: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def members(self, k: int) -> list[str]:
        return [self.member_ids[i] for i in np.flatnonzero(self.assignments == k)]


# --- k-means -------------------------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            probs = closest / total
        else:
            # every point coincides with a centre already; fall back to unchosen points
            probs = np.ones(n)
            probs[chosen] = 0.0
            probs /= probs.sum()
        i = int(rng.choice(n, p=probs))
        chosen.append(i)
        closest = np.minimum(closest, _sq_dists(x, x[i : i + 1])[:, 0])
    return x[chosen].copy()


def _means(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = centroids.copy()
    for k in range(len(centroids)):
        rows = x[labels == k]
        if len(rows):
            out[k] = rows.mean(axis=0)
    return out


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> None:
    """Reseed empty clusters with the point farthest from its own centroid (in place)."""
    K = len(centroids)
    for k in range(K):
        counts = np.bincount(labels, minlength=K)
        if counts[k]:
            continue
        cost = ((x - centroids[labels]) ** 2).sum(1)
        cost[counts[labels] <= 1] = -1.0  # never empty another cluster
        i = int(np.argmax(cost))
        centroids[k] = x[i]
        labels[i] = k


def _inertia(x, labels, centroids) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_fit(vectors, K: int, seed: int, ids: Optional[Sequence[str]] = None,
               max_iter: int = 100, tol: float = 1e-4) -> ClusterModel:
    """k-means++ seeding then Lloyd iterations until the largest centroid shift < tol."""
    x = np.asarray(vectors, dtype=np.float64)
    if K < 1 or len(x) < K:
        raise PreconditionError(f"need at least K={K} vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, K, rng)
    history = []
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        _repair_empty(x, labels, centroids)
        new = _means(x, labels, centroids)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        history.append(_inertia(x, labels, centroids))
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    _repair_empty(x, labels, centroids)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(x))]
    return ClusterModel(centroids=centroids, assignments=labels, member_ids=ids, seed=seed, inertia_history=history)


def cluster_database(store: EmbeddingStore, K: int, seed: int, vectors: Optional[np.ndarray] = None) -> ClusterModel:
    """Cluster the store's base db images; ``vectors`` overrides the store's rows (same order)."""
    rows = [rots[0] if 0 in rots else min(rots.values()) for rots in store.rotations_of.values()]
    src = store.vectors if vectors is None else vectors
    x = np.asarray(src[rows], dtype=np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return kmeans_fit(x, K, seed, ids=list(store.rotations_of))


def assign_queries(model: ClusterModel, query_vectors) -> ClusterModel:
    """Bin queries by nearest centroid and derive sampling weights b_k / sum(b).

    Centroids are untouched. With no queries the weights fall back to uniform.
    """
    q = np.asarray(query_vectors, dtype=np.float64).reshape(-1, model.dim) if len(query_vectors) else np.zeros((0, model.dim))
    if q.shape[1] != model.dim:
        raise FormatError(f"query dim {q.shape[1]} does not match centroid dim {model.dim}")
    if len(q):
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        labels = np.argmin(_sq_dists(q, model.centroids), axis=1)
        bins = np.bincount(labels, minlength=model.K)
    else:
        bins = np.zeros(model.K, dtype=np.int64)
    return replace(model, bins=bins, weights=bin_weights(bins))


def bin_weights(bins) -> np.ndarray:
    bins = np.asarray(bins, dtype=np.float64)
    total = bins.sum()
    if total <= 0:
        return np.full(len(bins), 1.0 / len(bins))
    return bins / total


def sample_cluster(model: ClusterModel, mode: str, rng: np.random.Generator) -> int:
    """Draw a cluster id: uniformly, or by inverse CDF over the query weights."""
    if mode == "uniform":
        return int(rng.integers(model.K))
    if mode != "weighted":
        raise ValueError(f"unknown sampling mode {mode!r}")
    weights = model.weights if model.weights is not None else np.full(model.K, 1.0 / model.K)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def refresh_schedule(iteration: int, every: int = 5000) -> bool:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return iteration % every == 0


# --- quadruplets ------------------------------------------------------------------


def quad_candidates(store: EmbeddingStore, model: ClusterModel) -> dict[int, list[tuple[int, ...]]]:
    """Per cluster, every quadruplet of store rows showing one place.

    A base image with all four rotations yields those four records. Bases
    without them are grouped greedily into fours of mutually overlapping
    footprints.
    """
    rots = store.rotations_of
    out: dict[int, list[tuple[int, ...]]] = {k: [] for k in range(model.K)}
    for k in range(model.K):
        loose = []
        for base in model.members(k):
            r = rots[base]
            if all(rot in r for rot in ROTATIONS):
                out[k].append(tuple(r[rot] for rot in ROTATIONS))
            elif store.records[next(iter(r.values()))].footprint is not None:
                loose.append(next(iter(r.values())))
        while len(loose) >= 4:
            seed_row = loose.pop(0)
            group = [seed_row]
            for row in list(loose):
                fp = store.records[row].footprint
                if all(footprints_overlap(fp, store.records[g].footprint) for g in group):
                    group.append(row)
                    loose.remove(row)
                    if len(group) == 4:
                        break
            if len(group) == 4:
                out[k].append(tuple(group))
    return out


def _quad_footprints(store: EmbeddingStore, quad: Sequence[int]) -> list[Footprint]:
    return list({store.records[i].footprint for i in quad if store.records[i].footprint is not None})


class _OverlapGuard:
    """Accumulates footprints and answers 'does this new one overlap any of them?'."""

    def __init__(self, capacity: int):
        self.boxes = np.zeros((max(capacity, 1), 4))
        self.fps: list[Footprint] = []

    def clashes(self, fp: Footprint) -> bool:
        n = len(self.fps)
        if n == 0:
            return False
        hits = np.flatnonzero(bbox_hits(self.boxes[:n], fp.bbox))
        return any(footprints_overlap(fp, self.fps[i]) for i in hits)

    def add(self, fp: Footprint) -> None:
        n = len(self.fps)
        if n == len(self.boxes):
            self.boxes = np.vstack([self.boxes, np.zeros_like(self.boxes)])
        self.boxes[n] = fp.bbox
        self.fps.append(fp)


def build_quad_batch(store: EmbeddingStore, model: ClusterModel, k: int, H: int, rng: np.random.Generator,
                     min_quads: Optional[int] = None, candidates=None) -> QuadBatch:
    """Up to ``H`` quadruplets from cluster ``k`` whose places do not overlap each other.

    Raises InsufficientClusterError when fewer than ``min_quads`` (default
    ``H``) can be formed; callers resample the cluster.
    """
    cands = (candidates or quad_candidates(store, model))[k]
    need = H if min_quads is None else min_quads
    if len(cands) < need:
        raise InsufficientClusterError(f"cluster {k} has {len(cands)} quadruplets, need {need}")
    guard = _OverlapGuard(4 * H)
    chosen = []
    for j in rng.permutation(len(cands)):
        fps = _quad_footprints(store, cands[j])
        if any(guard.clashes(fp) for fp in fps):
            continue
        for fp in fps:
            guard.add(fp)
        chosen.append(cands[j])
        if len(chosen) == H:
            break
    if len(chosen) < need:
        raise InsufficientClusterError(f"cluster {k} holds {len(chosen)} non-overlapping places, need {need}")
    return QuadBatch([tuple(store.records[i] for i in quad) for quad in chosen], cluster_id=k)


# --- query/db pairs -------------------------------------------------------------------


class MinedPair(NamedTuple):
    query_id: str
    db_id: str
    iou: float


def mine_pairs(store: EmbeddingStore, t_iou: float = 0.2) -> list[MinedPair]:
    """Every (query, base db image) whose footprints have IoU > t_iou."""
    queries = [store.records[i] for i in store.query_indices]
    for q in queries:
        if q.footprint is None:
            raise MissingFootprintError(f"query {q.id} has no footprint")
    bases = []
    for base, rots in store.rotations_of.items():
        rec = store.records[rots[0] if 0 in rots else min(rots.values())]
        if rec.footprint is not None:
            bases.append((base, rec.footprint))
    boxes = bbox_array([fp for _, fp in bases])
    pairs = []
    for q in queries:
        for j in np.flatnonzero(bbox_hits(boxes, q.footprint.bbox)) if len(bases) else []:
            iou = footprint_iou(q.footprint, bases[j][1])
            if iou > t_iou:
                pairs.append(MinedPair(q.id, bases[j][0], iou))
    return pairs


def build_pair_batch(store: EmbeddingStore, pair_index: Sequence[MinedPair], B: int, rng: np.random.Generator,
                     max_attempts: Optional[int] = None) -> PairBatch:
    """Sample B pairs without replacement such that no two pairs overlap geographically.

    The db side of each pair is one of its base image's rotations, drawn here.
    """
    max_attempts = 1000 * B if max_attempts is None else max_attempts
    guard = _OverlapGuard(2 * B)
    pairs = []
    attempts = 0
    rots = store.rotations_of
    for j in rng.permutation(len(pair_index)):
        if attempts >= max_attempts:
            break
        attempts += 1
        p = pair_index[j]
        q = store.record(p.query_id)
        variants = rots[p.db_id]
        d = store.records[variants[sorted(variants)[int(rng.integers(len(variants)))]]]
        fps = [q.footprint, d.footprint]
        if any(guard.clashes(fp) for fp in fps):
            continue
        for fp in fps:
            guard.add(fp)
        pairs.append((q, d))
        if len(pairs) == B:
            return PairBatch(pairs)
    raise CannotFillBatchError(f"could only place {len(pairs)} of {B} non-overlapping pairs")


# --- persistence -----------------------------------------------------------------------


def save_cluster_model(model: ClusterModel, path) -> None:
    """JSON header line, then the centroids as an AEM1 block."""
    header = {
        "K": model.K,
        "dim": model.dim,
        "bins": None if model.bins is None else [int(b) for b in model.bins],
        "seed": model.seed,
        "member_ids": model.member_ids,
        "assignments": [int(a) for a in model.assignments],
        "inertia_history": model.inertia_history,
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    meta = [{"id": f"centroid-{k}", "kind": "centroid"} for k in range(model.K)]
    write_aem(buf, model.centroids.astype(np.float32), meta)
    Path(path).write_bytes(buf.getvalue())


def load_cluster_model(path) -> ClusterModel:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("cluster file has no header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as e:
        raise FormatError(f"bad cluster header: {e}") from e
    centroids, _ = read_aem(data[nl + 1 :])
    if centroids.shape != (header["K"], header["dim"]):
        raise FormatError("centroid block does not match header")
    bins = None if header.get("bins") is None else np.asarray(header["bins"], dtype=np.int64)
    return ClusterModel(
        centroids=centroids.astype(np.float64),
        assignments=np.asarray(header.get("assignments", []), dtype=np.int64),
        member_ids=list(header.get("member_ids", [])),
        seed=header["seed"],
        inertia_history=list(header.get("inertia_history", [])),
        bins=bins,
        weights=None if bins is None else bin_weights(bins),
    )
