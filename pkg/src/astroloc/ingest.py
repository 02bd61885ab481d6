"""Line-delimited JSON footprint records plus a row-aligned vector matrix -> store."""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import numpy as np

from .errors import AstroLocError, FormatError
from .geo import Footprint, GeoPoint, footprint_area_sqkm
from .store import EmbeddingRecord, EmbeddingStore, _unit_rows

REQUIRED = ("id", "kind", "corners")


def read_records_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            missing = [k for k in REQUIRED if k not in obj]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            obj["_line"] = lineno
            rows.append(obj)
    return rows


def load_vectors(path) -> np.ndarray:
    try:
        v = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as e:
        raise FormatError(f"{path}: cannot read vector matrix ({e})") from e
    if v.ndim != 2:
        raise FormatError(f"{path}: expected a 2-D matrix, got shape {v.shape}")
    return v


def ingest(footprints_path, vectors_path) -> EmbeddingStore:
    rows = read_records_jsonl(footprints_path)
    vectors = load_vectors(vectors_path)
    if len(vectors) != len(rows):
        raise FormatError(f"{vectors_path}: {len(vectors)} vectors for {len(rows)} records")
    vectors = _unit_rows(vectors, [str(r["id"]) for r in rows])
    records = []
    for i, obj in enumerate(rows):
        where = f"{footprints_path}:{obj['_line']}"
        try:
            corners = obj["corners"]
            if not isinstance(corners, list) or len(corners) != 4:
                raise FormatError("corners must be four [lat, lon] pairs")
            weak = obj.get("weak")
            records.append(EmbeddingRecord(
                id=str(obj["id"]),
                kind=obj["kind"],
                vector=vectors[i],
                base_id=obj.get("base_id"),
                rotation=int(obj.get("rotation", 0)),
                footprint=Footprint.from_latlon(corners),
                zoom=obj.get("zoom"),
                weak=GeoPoint(*weak) if weak else None,
                timestamp=obj.get("timestamp"),
            ))
        except AstroLocError as e:
            raise type(e)(f"{where}: {e}") from e
        except (TypeError, ValueError) as e:
            raise FormatError(f"{where}: {e}") from e
    return EmbeddingStore(vectors.shape[1], records)


def summarize(store: EmbeddingStore) -> dict:
    """Counts per kind and zoom, and 5th/95th percentile footprint areas per kind."""
    kinds = Counter(r.kind for r in store.records)
    zooms = Counter(f"{r.kind}/{r.zoom}" for r in store.records if r.zoom is not None)
    areas = {}
    for kind in sorted(kinds):
        vals = [footprint_area_sqkm(r.footprint) for r in store.records if r.kind == kind and r.footprint]
        if vals:
            p5, p95 = np.percentile(vals, [5, 95])
            areas[kind] = {"p5_sqkm": float(p5), "p95_sqkm": float(p95)}
    return {"records": len(store), "dim": store.dim, "per_kind": dict(sorted(kinds.items())),
            "per_kind_zoom": dict(sorted(zooms.items())), "area_percentiles": areas}


def write_records_jsonl(store: EmbeddingStore, path) -> None:
    """Inverse of :func:`read_records_jsonl` for the metadata half of a store."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for r in store.records:
            obj = {"id": r.id, "kind": r.kind, "corners": r.footprint.to_latlon() if r.footprint else None}
            if r.zoom is not None:
                obj["zoom"] = r.zoom
            if r.weak is not None:
                obj["weak"] = [r.weak.lat, r.weak.lon]
            if r.timestamp is not None:
                obj["timestamp"] = r.timestamp
            if r.rotation:
                obj["base_id"], obj["rotation"] = r.base_id, r.rotation
            fh.write(json.dumps(obj) + "\n")
