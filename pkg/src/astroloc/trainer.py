"""Desk-scale training loop over a free table of embedding parameters.

There is no backbone here: every record's vector is itself a parameter.
Each step samples one pair batch and one quadruplet batch, evaluates the
combined loss and takes a plain gradient step on the rows that took part.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InsufficientClusterError, NumericError, PreconditionError
from .losses import LossConfig, mum_loss_arrays, pair_loss_arrays
from .mining import (
    ClusterModel,
    MinedPair,
    assign_queries,
    build_pair_batch,
    build_quad_batch,
    cluster_database,
    mine_pairs,
    quad_candidates,
    refresh_schedule,
    sample_cluster,
)
from .retrieval import RecallReport, build_index, recall_at_n
from .store import EmbeddingStore

log = logging.getLogger(__name__)

MIN_QUADS = 2  # one quadruplet alone has no negatives


@dataclass
class TrainState:
    raw_params: np.ndarray
    store: EmbeddingStore = field(repr=False)
    cfg: LossConfig
    lr: float
    seed: int
    mining: str = "weighted"
    iteration: int = 0
    loss_history: list[tuple[int, float, float, float]] = field(default_factory=list)
    model: Optional[ClusterModel] = field(default=None, repr=False)

    def current_store(self) -> EmbeddingStore:
        """The input store with trained vectors; rows never moved keep their exact bytes."""
        moved = np.any(self.raw_params != self.store.vectors.astype(np.float64), axis=1)
        if not moved.any():
            return self.store
        unit = self.raw_params / np.linalg.norm(self.raw_params, axis=1, keepdims=True)
        vectors = np.where(moved[:, None], unit.astype(np.float32), self.store.vectors)
        return self.store.with_vectors(vectors)

    def sidecar(self) -> dict:
        return {
            "iteration": self.iteration,
            "cfg": asdict(self.cfg),
            "lr": self.lr,
            "seed": self.seed,
            "mining": self.mining,
            "loss_history": [list(h) for h in self.loss_history],
            "bins": None if self.model is None or self.model.bins is None else [int(b) for b in self.model.bins],
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), sort_keys=True, indent=1)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def train(
    store: EmbeddingStore,
    cfg: LossConfig = LossConfig(),
    lr: float = 0.05,
    iterations: int = 2000,
    seed: int = 0,
    mining: str = "weighted",
    pair_index: Optional[Sequence[MinedPair]] = None,
    quad_retries: int = 100,
    callback: Optional[Callable[[TrainState], None]] = None,
) -> tuple[TrainState, EmbeddingStore]:
    """Optimize the store's vectors under lambda1 * pair loss + lambda2 * MUM loss.

    ``mining`` picks the MUM cluster sampler: "weighted" by training-query
    bins, or "uniform" (plain multi-similarity mining).
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if mining not in ("weighted", "uniform"):
        raise ValueError(f"unknown mining mode {mining!r}")
    rng = np.random.default_rng(seed)
    state = TrainState(store.vectors.astype(np.float64), store, cfg, lr, seed, mining)
    use_pairs, use_quads = cfg.lambda1 > 0, cfg.lambda2 > 0
    if use_pairs:
        pair_index = mine_pairs(store, cfg.t_iou) if pair_index is None else pair_index
        if not pair_index:
            raise PreconditionError("no query/db pairs above the IoU threshold")
    query_rows = store.query_indices
    candidates = None

    for it in range(iterations):
        state.iteration = it
        if use_quads and refresh_schedule(it, cfg.refresh_every):
            current = _unit(state.raw_params)
            model = cluster_database(store, cfg.K, seed + it, vectors=current)
            state.model = assign_queries(model, current[query_rows])
            candidates = quad_candidates(store, state.model)
            log.debug("iteration %d: refreshed %d clusters, bins %s", it, cfg.K, state.model.bins)

        grad = {}
        l_pair = l_mum = 0.0
        if use_pairs:
            batch = build_pair_batch(store, pair_index, cfg.batch_size, rng)
            q_rows = [store.index_of[q.id] for q, _ in batch.pairs]
            d_rows = [store.index_of[d.id] for _, d in batch.pairs]
            pos, neg, gq, gd = pair_loss_arrays(state.raw_params[q_rows], state.raw_params[d_rows], cfg)
            l_pair = pos + neg
            _add(grad, q_rows, cfg.lambda1 * gq)
            _add(grad, d_rows, cfg.lambda1 * gd)
        if use_quads:
            quads = _sample_quads(store, state, candidates, rng, quad_retries)
            rows = [store.index_of[rid] for rid in quads.ids]
            x = state.raw_params[rows].reshape(len(quads.quads), 4, -1)
            att, rep, g = mum_loss_arrays(x, cfg)
            l_mum = att + rep
            _add(grad, rows, cfg.lambda2 * g.reshape(len(rows), -1))

        total = cfg.lambda1 * l_pair + cfg.lambda2 * l_mum
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at iteration {it}")
        state.loss_history.append((it, float(l_pair), float(l_mum), float(total)))
        if grad and lr > 0:
            rows = np.fromiter(grad, dtype=np.int64)
            step = np.stack([grad[r] for r in rows])
            state.raw_params[rows] -= lr * step
            if not np.isfinite(state.raw_params[rows]).all():
                raise NumericError(f"non-finite parameters after iteration {it}")
        if callback is not None:
            callback(state)
    state.iteration = iterations
    return state, state.current_store()


def _add(grad: dict, rows, values: np.ndarray) -> None:
    for r, v in zip(rows, values):
        grad[r] = grad[r] + v if r in grad else v


def _sample_quads(store, state: TrainState, candidates, rng, retries: int):
    last = None
    for _ in range(retries):
        k = sample_cluster(state.model, state.mining, rng)
        try:
            return build_quad_batch(store, state.model, k, state.cfg.batch_size, rng,
                                    min_quads=MIN_QUADS, candidates=candidates)
        except InsufficientClusterError as e:
            last = e
    raise InsufficientClusterError(f"no usable cluster after {retries} draws: {last}")


def eval_checkpoint(state: TrainState, eval_store: Optional[EmbeddingStore] = None,
                    Ns: Sequence[int] = (1, 10, 100)) -> RecallReport:
    """Recall of ``eval_store``'s queries against the current db embeddings.

    Queries that were trained (same id in the training store) are scored with
    their trained vectors; others keep the vectors they arrive with.
    """
    current = state.current_store()
    index = build_index(current, augment=True)
    source = current if eval_store is None else eval_store
    queries = []
    for i in source.query_indices:
        rec = source.records[i]
        if eval_store is not None and rec.id in current.index_of:
            rec = current.record(rec.id)
        queries.append(rec)
    return recall_at_n(index, queries, Ns)
