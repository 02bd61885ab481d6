import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from astroloc.errors import FormatError, NumericError, PreconditionError
from astroloc.geo import Footprint, GeoPoint, footprint_area_sqkm, footprint_iou
from astroloc.ingest import ingest, summarize, write_records_jsonl
from astroloc.store import (
    EmbeddingRecord,
    EmbeddingStore,
    cosine_similarity,
    load_store,
    read_aem,
    save_store,
    synth_dataset,
    write_aem,
)
from oracles import percentile_linear


def _bytes(store):
    buf = io.BytesIO()
    write_aem(buf, store.vectors, [r.metadata() for r in store.records])
    return buf.getvalue()


def test_round_trip_is_exact(tmp_path, small_store):
    path = tmp_path / "s.aem"
    save_store(small_store, path)
    back = load_store(path)
    assert back == small_store
    assert back.vectors.tobytes() == small_store.vectors.tobytes()
    save_store(back, tmp_path / "t.aem")
    assert (tmp_path / "t.aem").read_bytes() == path.read_bytes()


def test_header_layout(small_store):
    data = _bytes(small_store)
    magic, version, count, dim = struct.unpack_from("<4sIII", data)
    assert (magic, version, count, dim) == (b"AEM1", 1, len(small_store), small_store.dim)
    (offset,) = struct.unpack_from("<Q", data, len(data) - 8)
    assert offset == 16 + 4 * count * dim
    first = json.loads(data[offset:].split(b"\n")[0])
    assert first["id"] == small_store.records[0].id


def test_bad_magic_version_and_truncation(small_store):
    data = _bytes(small_store)
    with pytest.raises(FormatError, match="magic"):
        read_aem(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        read_aem(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        read_aem(data[:100])
    with pytest.raises(FormatError):
        read_aem(data[:-30] + data[-8:])


def test_empty_store_round_trip(tmp_path):
    empty = EmbeddingStore(8, [])
    save_store(empty, tmp_path / "e.aem")
    assert len(load_store(tmp_path / "e.aem")) == 0


def test_vectors_are_normalized_and_read_only():
    s = EmbeddingStore(3, [EmbeddingRecord("a", "db", np.array([3.0, 4.0, 0.0]))])
    np.testing.assert_allclose(s.vectors[0], [0.6, 0.8, 0.0], atol=1e-7)
    assert s.vectors.dtype == np.float32
    with pytest.raises(ValueError):
        s.vectors[0, 0] = 1.0


def test_unit_float32_rows_kept_bit_identical(small_store):
    again = EmbeddingStore(small_store.dim, small_store.records)
    assert again.vectors.tobytes() == small_store.vectors.tobytes()


@pytest.mark.parametrize("bad,err", [([np.nan, 1.0], NumericError), ([0.0, 0.0], NumericError)])
def test_bad_vectors_name_the_record(bad, err):
    with pytest.raises(err, match="rec-7"):
        EmbeddingStore(2, [EmbeddingRecord("ok", "db", np.ones(2)), EmbeddingRecord("rec-7", "db", np.array(bad))])


def test_store_rejects_duplicates_and_bad_dim():
    r = EmbeddingRecord("a", "db", np.ones(2))
    with pytest.raises(FormatError):
        EmbeddingStore(2, [r, r])
    with pytest.raises(FormatError):
        EmbeddingStore(3, [r])


def test_record_rotation_rules():
    with pytest.raises(FormatError):
        EmbeddingRecord("a", "db", np.ones(2), rotation=45)
    with pytest.raises(FormatError):
        EmbeddingRecord("a", "db", np.ones(2), base_id="b", rotation=0)
    with pytest.raises(FormatError):
        EmbeddingRecord("a", "satellite", np.ones(2))
    assert EmbeddingRecord("a_r90", "db", np.ones(2), base_id="a", rotation=90).base_id == "a"


@settings(max_examples=50)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)))
def test_cosine_similarity_bounds(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert cosine_similarity(a, a) == pytest.approx(1.0)


def test_cosine_similarity_rejects_zero():
    with pytest.raises(NumericError):
        cosine_similarity([0, 0], [1, 0])


# --- synthetic data ------------------------------------------------------------------------


def test_synth_shape_and_determinism():
    a = synth_dataset(20, 3, 2, 8, 0.5, seed=9)
    b = synth_dataset(20, 3, 2, 8, 0.5, seed=9)
    assert a == b
    assert len(a.query_indices) == 40
    assert len(a.db_indices) == 20 * 3 * 4
    assert len(a.rotations_of) == 60
    assert all(sorted(r) == [0, 90, 180, 270] for r in a.rotations_of.values())
    assert synth_dataset(20, 3, 2, 8, 0.5, seed=10) != a


def test_synth_queries_overlap_only_their_location(small_store):
    bases = {b: small_store.records[r[0]] for b, r in small_store.rotations_of.items()}
    for i in small_store.query_indices:
        q = small_store.records[i]
        loc = q.id[1:].split("_")[0]
        for b, rec in bases.items():
            iou = footprint_iou(q.footprint, rec.footprint)
            if b.startswith(f"db{loc}_"):
                # worst case: 0.3-cell shift on both axes, 0.49 / 1.51
                assert iou > 0.3
            else:
                assert iou == 0.0
        assert q.footprint.contains(q.weak)


def test_synth_capacity_and_arguments():
    with pytest.raises(PreconditionError, match="capacity"):
        synth_dataset(20_000, 1, 1, 4, 0.1, 0)
    with pytest.raises(PreconditionError):
        synth_dataset(5, 0, 1, 4, 0.1, 0)


# --- ingest ---------------------------------------------------------------------------------


def _write_inputs(tmp_path, rows, vectors):
    fp = tmp_path / "fp.jsonl"
    fp.write_text("".join(json.dumps(r) + "\n" for r in rows))
    vp = tmp_path / "v.npy"
    np.save(vp, np.asarray(vectors))
    return fp, vp


THREE = [
    {"id": "q1", "kind": "query", "corners": [[1, 0], [1, 1], [0, 1], [0, 0]], "weak": [0.5, 0.5],
     "timestamp": "2021-05-01T10:00:00Z"},
    {"id": "d1", "kind": "db", "zoom": 9, "corners": [[1, 0], [1, 1], [0, 1], [0, 0]]},
    {"id": "d2", "kind": "db", "zoom": 10, "corners": [[11, 10], [11, 12], [10, 12], [10, 10]]},
]


def test_ingest_three_records(tmp_path):
    fp, vp = _write_inputs(tmp_path, THREE, np.eye(3, 4) * 2)
    store = ingest(fp, vp)
    assert len(store) == 3
    assert store.record("q1").weak == GeoPoint(0.5, 0.5)
    np.testing.assert_allclose(np.linalg.norm(store.vectors, axis=1), 1.0, atol=1e-7)


def test_ingest_summary_percentiles(tmp_path):
    fp, vp = _write_inputs(tmp_path, THREE, np.eye(3, 4))
    summary = summarize(ingest(fp, vp))
    assert summary["per_kind"] == {"db": 2, "query": 1}
    assert summary["per_kind_zoom"] == {"db/10": 1, "db/9": 1}
    areas = [footprint_area_sqkm(Footprint.from_latlon(r["corners"])) for r in THREE[1:]]
    got = summary["area_percentiles"]["db"]
    assert got["p5_sqkm"] == pytest.approx(percentile_linear(areas, 5), rel=1e-12)
    assert got["p95_sqkm"] == pytest.approx(percentile_linear(areas, 95), rel=1e-12)


def test_ingest_nan_vector_names_record(tmp_path):
    v = np.eye(3, 4)
    v[2, 1] = np.nan
    fp, vp = _write_inputs(tmp_path, THREE, v)
    with pytest.raises(NumericError, match="d2"):
        ingest(fp, vp)


def test_ingest_format_errors_carry_line(tmp_path):
    rows = [THREE[0], {"id": "x", "kind": "db"}]
    fp, vp = _write_inputs(tmp_path, rows, np.eye(2, 4))
    with pytest.raises(FormatError, match=r"fp.jsonl:2: missing field\(s\) corners"):
        ingest(fp, vp)
    fp.write_text(json.dumps(THREE[0]) + "\n{not json\n")
    with pytest.raises(FormatError, match=":2: invalid JSON"):
        ingest(fp, vp)


def test_ingest_count_mismatch(tmp_path):
    fp, vp = _write_inputs(tmp_path, THREE, np.eye(2, 4))
    with pytest.raises(FormatError, match="2 vectors for 3 records"):
        ingest(fp, vp)


def test_records_jsonl_round_trip(tmp_path, small_store):
    write_records_jsonl(small_store, tmp_path / "r.jsonl")
    np.save(tmp_path / "v.npy", small_store.vectors)
    back = ingest(tmp_path / "r.jsonl", tmp_path / "v.npy")
    assert back == small_store
