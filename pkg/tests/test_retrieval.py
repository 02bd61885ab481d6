import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astroloc.errors import FormatError, MissingFootprintError, PreconditionError
from astroloc.geo import Footprint, GeoPoint, great_circle_km
from astroloc.retrieval import (
    build_index,
    index_memory_bytes,
    query_regions,
    recall_at_n,
    search,
    worldwide_eval,
)
from astroloc.store import EmbeddingRecord, EmbeddingStore


def naive_top(store, q, N):
    """Full scan in plain Python: best rotation per base, ties (to 12 decimals) by base id."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    best = {}
    for i in store.db_indices:
        r = store.records[i]
        s = float(np.asarray(r.vector, dtype=np.float64) @ q)
        best[r.base_id] = max(best.get(r.base_id, -np.inf), s)
    return sorted(best, key=lambda b: (-round(best[b], 12), b))[:N]


def test_index_layout(small_store):
    idx = build_index(small_store)
    assert idx.num_base == len(small_store.rotations_of)
    assert idx.num_entries == 4 * idx.num_base
    assert list(idx.base_ids) == sorted(idx.base_ids)
    assert idx.nbytes == index_memory_bytes(idx.num_base, small_store.dim)
    flat = build_index(small_store, augment=False)
    assert flat.num_entries == flat.num_base


def test_memory_formula():
    assert index_memory_bytes(12_000, 512) == 12_000 * 512 * 4 * 4
    assert index_memory_bytes(10, 8, augment=False) == 320


def test_missing_rotations_rejected():
    fp = Footprint.from_bounds(0, 0, 1, 1)
    store = EmbeddingStore(2, [EmbeddingRecord("a", "db", np.ones(2), footprint=fp)])
    with pytest.raises(PreconditionError, match="rotation"):
        build_index(store)
    assert build_index(store, augment=False).num_base == 1


def test_search_matches_naive(small_store, rng):
    idx = build_index(small_store)
    for _ in range(20):
        q = rng.normal(size=small_store.dim)
        N = int(rng.integers(1, 70))
        assert [b for b, _ in search(idx, q, N)] == naive_top(small_store, q, N)


def test_ties_break_by_base_id():
    recs = []
    for name in ("c", "a", "b"):
        recs.append(EmbeddingRecord(name, "db", np.array([1.0, 0.0])))
        for rot in (90, 180, 270):
            recs.append(EmbeddingRecord(f"{name}_r{rot}", "db", np.array([0.0, 1.0]), base_id=name, rotation=rot))
    idx = build_index(EmbeddingStore(2, recs))
    out = search(idx, [1.0, 0.0], 3)
    assert [b for b, _ in out] == ["a", "b", "c"]
    assert all(s == pytest.approx(1.0) for _, s in out)


def test_best_rotation_scores_the_base():
    recs = [EmbeddingRecord("x", "db", np.array([0.0, 1.0]))]
    recs += [EmbeddingRecord(f"x_r{r}", "db", np.array([1.0, 0.0] if r == 180 else [0.0, 1.0]), base_id="x", rotation=r)
             for r in (90, 180, 270)]
    idx = build_index(EmbeddingStore(2, recs))
    assert search(idx, [1.0, 0.0], 1) == [("x", pytest.approx(1.0))]


def test_search_argument_errors(small_store):
    idx = build_index(small_store)
    with pytest.raises(FormatError):
        search(idx, np.ones(3), 1)
    with pytest.raises(ValueError):
        search(idx, np.ones(small_store.dim), 0)


def test_region_excludes_far_bases(small_store):
    idx = build_index(small_store)
    q = small_store.records[small_store.query_indices[0]]
    region = (q.weak, 300.0)
    got = search(idx, q.vector, 500, region=region)
    assert 0 < len(got) < idx.num_base
    for base, _ in got:
        c = idx.footprints[idx.base_ids.index(base)].centroid
        assert great_circle_km(c, q.weak) <= 300.0 + 1e-6


def test_empty_region_is_an_error(small_store):
    idx = build_index(small_store)
    with pytest.raises(PreconditionError):
        search(idx, np.ones(small_store.dim), 1, region=(GeoPoint(-85, 0), 1.0))


# --- recall ------------------------------------------------------------------------------------


def _queries(store):
    return [store.records[i] for i in store.query_indices]


def test_recall_monotone_and_saturates(small_store):
    idx = build_index(small_store)
    Ns = list(range(1, idx.num_base + 1, 7)) + [idx.num_base]
    rep = recall_at_n(idx, _queries(small_store), Ns)
    vals = [rep.recall_at[n] for n in sorted(rep.recall_at)]
    assert vals == sorted(vals)
    assert rep.recall_at[idx.num_base] == 100.0


def test_recall_counts_first_overlapping_hit(small_store):
    idx = build_index(small_store)
    qs = _queries(small_store)
    rep = recall_at_n(idx, qs, [1])
    hits = 0
    for q in qs:
        top = naive_top(small_store, q.vector, 1)[0]
        loc = q.id[1:].split("_")[0]
        hits += top.startswith(f"db{loc}_")
    assert rep.recall_at[1] == pytest.approx(100.0 * hits / len(qs))


def test_report_serialization(small_store):
    rep = recall_at_n(build_index(small_store), _queries(small_store), [1, 10, 100])
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "N,recall_pct" and len(lines) == 4
    d = json.loads(rep.to_json())
    assert d["num_db_base"] == 60 and d["num_db_augmented"] == 240
    assert set(d["predictions"]) == {q.id for q in _queries(small_store)}


def test_recall_requires_footprints(small_store):
    q = EmbeddingRecord("q", "query", np.ones(small_store.dim))
    with pytest.raises(MissingFootprintError):
        recall_at_n(build_index(small_store), [q], [1])


def test_region_recall_not_below_worldwide(small_store):
    idx = build_index(small_store)
    qs = _queries(small_store)
    world = recall_at_n(idx, qs, [1, 5])
    region = recall_at_n(idx, qs, [1, 5], regions=query_regions(qs))
    assert region.scope == "region"
    for n in (1, 5):
        assert region.recall_at[n] >= world.recall_at[n]


def test_worldwide_eval_matches_recall_and_times(small_store):
    idx = build_index(small_store)
    qs = _queries(small_store)
    w = worldwide_eval(idx, qs, [1, 10])
    assert w.recall_at == recall_at_n(idx, qs, [1, 10]).recall_at
    assert set(w.latency_micros) == {q.id for q in qs}
    s = w.latency_summary()
    assert s["p95_micros"] >= 0 and "search only" in s["measures"]
    assert w.latency_csv().startswith("query_id,micros\n")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40), dim=st.integers(2, 6))
def test_random_instances_match_naive(seed, n, dim):
    rng = np.random.default_rng(seed)
    # coarse values make exact ties common
    recs = []
    for j in range(n):
        base = f"b{j:03d}"
        for rot in (0, 90, 180, 270):
            rid = base if rot == 0 else f"{base}_r{rot}"
            v = rng.integers(-2, 3, size=dim).astype(float)
            if not v.any():
                v[0] = 1.0
            recs.append(EmbeddingRecord(rid, "db", v, base_id=base, rotation=rot))
    store = EmbeddingStore(dim, recs)
    idx = build_index(store)
    q = rng.integers(-2, 3, size=dim).astype(float)
    q[0] += 0.5
    N = int(rng.integers(1, n + 1))
    assert [b for b, _ in search(idx, q, N)] == naive_top(store, q, N)
