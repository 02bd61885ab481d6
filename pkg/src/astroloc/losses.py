"""Pairwise query/satellite loss, MUM quadruplet loss and their weighted sum.

Every loss takes raw (unnormalized) vectors, measures cosine similarity on
their normalized versions and returns gradients with respect to the raw
coordinates. All ``log(1 + sum exp(.))`` terms go through a max-shifted
log-sum-exp so gains of 50 and beyond stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import FormatError, InvalidBatchError
from .geo import footprint_iou, footprints_overlap
from .store import EmbeddingRecord


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0
    beta1: float = 50.0
    alpha2: float = 1.0
    beta2: float = 50.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    t_iou: float = 0.2
    K: int = 50
    batch_size: int = 48
    refresh_every: int = 5000

    def __post_init__(self):
        for name in ("alpha1", "beta1", "alpha2", "beta2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.t_iou <= 1:
            raise ValueError("t_iou must lie in (0, 1]")
        if self.K < 1 or self.batch_size < 1 or self.refresh_every < 1:
            raise ValueError("K, batch_size and refresh_every must be positive")


@dataclass
class PairBatch:
    pairs: list[tuple[EmbeddingRecord, EmbeddingRecord]]

    def validate(self, t_iou: float) -> None:
        if not self.pairs:
            raise InvalidBatchError("empty pair batch")
        for q, d in self.pairs:
            if q.footprint is None or d.footprint is None:
                continue
            if footprint_iou(q.footprint, d.footprint) <= t_iou:
                raise InvalidBatchError(f"pair ({q.id}, {d.id}) has IoU <= {t_iou}")
        for i, (qi, di) in enumerate(self.pairs):
            for qj, dj in self.pairs[i + 1 :]:
                for a in (qi, di):
                    for b in (qj, dj):
                        if a.footprint and b.footprint and footprints_overlap(a.footprint, b.footprint):
                            raise InvalidBatchError(f"{a.id} and {b.id} overlap but sit in different pairs")


@dataclass
class QuadBatch:
    quads: list[tuple[EmbeddingRecord, EmbeddingRecord, EmbeddingRecord, EmbeddingRecord]]
    cluster_id: int = -1
    ids: list[str] = field(init=False)

    def __post_init__(self):
        self.ids = [r.id for quad in self.quads for r in quad]

    def validate(self) -> None:
        if not self.quads:
            raise InvalidBatchError("empty quadruplet batch")
        for quad in self.quads:
            if len(quad) != 4:
                raise InvalidBatchError("quadruplets need exactly 4 members")
            fps = [r.footprint for r in quad if r.footprint is not None]
            for i, a in enumerate(fps):
                for b in fps[i + 1 :]:
                    if not footprints_overlap(a, b):
                        raise InvalidBatchError("quadruplet members do not show the same place")


# --- scalar building blocks ------------------------------------------------------


def attraction(x: float, s: float) -> float:
    """log(1 + exp(-x * s))."""
    return float(np.logaddexp(0.0, -x * s))


def repulsion(x: float, anchor, others) -> float:
    """log(1 + sum_j exp(x * S(anchor, others_j))); exactly 0 for no others."""
    others = np.asarray(others, dtype=np.float64)
    if others.size == 0:
        return 0.0
    anchor = np.asarray(anchor, dtype=np.float64)
    others = others.reshape(-1, anchor.shape[-1]) if others.ndim == 1 else others
    if others.shape[1] != anchor.shape[0]:
        raise FormatError(f"dimension mismatch: {anchor.shape[0]} vs {others.shape[1]}")
    a = anchor / np.linalg.norm(anchor)
    z = x * (others / np.linalg.norm(others, axis=1, keepdims=True)) @ a
    m = max(0.0, float(z.max()))
    return m + float(np.log(np.exp(-m) + np.exp(z - m).sum()))


# --- vectorized terms -------------------------------------------------------------


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms, norms


def _raw_grad(u: np.ndarray, norms: np.ndarray, g_u: np.ndarray) -> np.ndarray:
    """Pull a gradient on unit vectors back through x -> x / |x|."""
    return (g_u - u * np.sum(u * g_u, axis=-1, keepdims=True)) / norms


def _log1p_sum_exp(z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log(1 + sum_{mask} exp(z)) and its derivative weights dvalue/dz."""
    zm = np.where(mask, z, -np.inf)
    m = np.maximum(zm.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(mask, np.exp(zm - m[:, None]), 0.0)
    value = m + np.log(np.exp(-m) + e.sum(axis=1))
    weights = np.where(mask, np.exp(zm - value[:, None]), 0.0)
    return value, weights


def pair_loss_arrays(q_raw: np.ndarray, d_raw: np.ndarray, cfg: LossConfig):
    """Pair loss on row-aligned query/db matrices.

    Returns ``(l_pos, l_neg, grad_q, grad_d)``; the loss is ``l_pos + l_neg``.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    d_raw = np.asarray(d_raw, dtype=np.float64)
    if q_raw.shape != d_raw.shape or q_raw.ndim != 2 or len(q_raw) == 0:
        raise InvalidBatchError(f"pair batch shapes {q_raw.shape} and {d_raw.shape} do not align")
    B = len(q_raw)
    a1, b1 = cfg.alpha1, cfg.beta1
    uq, nq = _normalize(q_raw)
    ud, nd = _normalize(d_raw)

    s = np.sum(uq * ud, axis=1)
    l_pos = float(np.logaddexp(0.0, -a1 * s).sum() / (a1 * B))
    ds = -expit(-a1 * s) / B
    gq = ds[:, None] * ud
    gd = ds[:, None] * uq

    others = ~np.eye(B, dtype=bool)
    l_neg = 0.0
    for anchor, ga in ((uq, gq), (ud, gd)):
        for pool, gp in ((uq, gq), (ud, gd)):
            value, w = _log1p_sum_exp(b1 * anchor @ pool.T, others)
            l_neg += value.sum()
            dS = w / B  # (1 / (beta B)) * beta * w
            ga += dS @ pool
            gp += dS.T @ anchor
    l_neg = float(l_neg / (b1 * B))
    return l_pos, l_neg, _raw_grad(uq, nq, gq), _raw_grad(ud, nd, gd)


def mum_loss_arrays(x_raw: np.ndarray, cfg: LossConfig):
    """MUM loss on an (H, 4, dim) array of quadruplets. Returns ``(l_att, l_rep, grad)``."""
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.ndim != 3 or x_raw.shape[1] != 4 or len(x_raw) == 0:
        raise InvalidBatchError(f"quadruplet batch must have shape (H, 4, dim), got {x_raw.shape}")
    H, _, dim = x_raw.shape
    a2, b2 = cfg.alpha2, cfg.beta2
    u, n = _normalize(x_raw.reshape(4 * H, dim))
    group = np.repeat(np.arange(H), 4)
    same = group[:, None] == group[None, :]
    S = u @ u.T

    att, w_att = _log1p_sum_exp(-a2 * S, same & ~np.eye(4 * H, dtype=bool))
    rep, w_rep = _log1p_sum_exp(b2 * S, ~same)
    l_att = float(att.sum() / (4 * H * a2))
    l_rep = float(rep.sum() / (4 * H * b2))
    dS = (w_rep - w_att) / (4 * H)
    g = dS @ u + dS.T @ u
    return l_att, l_rep, _raw_grad(u, n, g).reshape(H, 4, dim)


# --- record-level API ---------------------------------------------------------


def _accumulate(grads: dict, ids: Sequence[str], rows: np.ndarray, scale: float) -> None:
    for rid, row in zip(ids, rows):
        if rid in grads:
            grads[rid] = grads[rid] + scale * row
        else:
            grads[rid] = scale * row


def pair_loss(batch: PairBatch, cfg: LossConfig, validate: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    if validate:
        batch.validate(cfg.t_iou)
    q = np.stack([p[0].vector for p in batch.pairs])
    d = np.stack([p[1].vector for p in batch.pairs])
    l_pos, l_neg, gq, gd = pair_loss_arrays(q, d, cfg)
    grads: dict[str, np.ndarray] = {}
    _accumulate(grads, [p[0].id for p in batch.pairs], gq, 1.0)
    _accumulate(grads, [p[1].id for p in batch.pairs], gd, 1.0)
    return l_pos + l_neg, grads


def mum_loss(batch: QuadBatch, cfg: LossConfig, validate: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    if validate:
        batch.validate()
    x = np.stack([np.stack([r.vector for r in quad]) for quad in batch.quads])
    l_att, l_rep, g = mum_loss_arrays(x, cfg)
    grads: dict[str, np.ndarray] = {}
    _accumulate(grads, batch.ids, g.reshape(-1, x.shape[-1]), 1.0)
    return l_att + l_rep, grads


def total_loss(
    pair_batch: Optional[PairBatch], quad_batch: Optional[QuadBatch], cfg: LossConfig, validate: bool = True
) -> tuple[float, dict[str, np.ndarray]]:
    """lambda1 * pair loss + lambda2 * MUM loss; shared vectors accumulate gradients."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    if pair_batch is not None and cfg.lambda1 > 0:
        value, g = pair_loss(pair_batch, cfg, validate)
        total += cfg.lambda1 * value
        for rid, row in g.items():
            _accumulate(grads, [rid], row[None], cfg.lambda1)
    if quad_batch is not None and cfg.lambda2 > 0:
        value, g = mum_loss(quad_batch, cfg, validate)
        total += cfg.lambda2 * value
        for rid, row in g.items():
            _accumulate(grads, [rid], row[None], cfg.lambda2)
    return total, grads
