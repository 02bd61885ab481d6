"""Slippy-map tiles, image footprints and the geographic predicates built on them.

Planar work (IoU, containment, overlap) happens in normalized Web-Mercator
coordinates: x in [0, 1] grows eastward from lon -180, y in [0, 1] grows
southward from the northern Mercator limit. Footprint edges are straight
lines in that plane (rhumb lines on the sphere), and areas in square
kilometres are integrated exactly along those edges.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometryError, GeometryError, InvalidTileError

EARTH_RADIUS_KM = 6371.0088
MAX_LAT = math.degrees(math.atan(math.sinh(math.pi)))  # 85.05112878
MAX_ZOOM = 24
OFFSETS = ("none", "half-x", "half-y", "half-both")
ROTATIONS = (0, 90, 180, 270)
DEFAULT_ZOOMS = (8, 9, 10, 11, 12)
VISIBLE_AREA_SQKM = 2.0e7
WORLD_AREA_SQKM = 5.1e8

_OFFSET_SHIFT = {
    "none": (0.0, 0.0),
    "half-x": (0.5, 0.0),
    "half-y": (0.0, 0.5),
    "half-both": (0.5, 0.5),
}


def visible_radius_km(area_sqkm: float = VISIBLE_AREA_SQKM, radius: float = EARTH_RADIUS_KM) -> float:
    """Great-circle radius of the spherical cap with the given area."""
    cos_theta = 1.0 - area_sqkm / (2.0 * math.pi * radius**2)
    if not -1.0 <= cos_theta <= 1.0:
        raise GeometryError(f"cap area {area_sqkm} exceeds the sphere")
    return radius * math.acos(cos_theta)


DEFAULT_R_VIS_KM = visible_radius_km()


def lat_to_y(lat: float) -> float:
    return (1.0 - math.asinh(math.tan(math.radians(lat))) / math.pi) / 2.0


def y_to_lat(y: float) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y))))


def lon_to_x(lon: float) -> float:
    return (lon + 180.0) / 360.0


def x_to_lon(x: float) -> float:
    return 360.0 * x - 180.0


def wrap_lon(lon: float) -> float:
    """Map any longitude into [-180, 180)."""
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeometryError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if abs(self.lat) > MAX_LAT + 1e-9:
            raise GeometryError(f"latitude {self.lat} outside Web-Mercator bounds")
        # 180 is accepted so footprints can reach the eastern map edge.
        if not -180.0 <= self.lon <= 180.0:
            raise GeometryError(f"longitude {self.lon} outside [-180, 180]")

    @property
    def xy(self) -> tuple[float, float]:
        return lon_to_x(self.lon), lat_to_y(self.lat)

    def unit_vector(self) -> np.ndarray:
        phi, lam = math.radians(self.lat), math.radians(self.lon)
        return np.array([math.cos(phi) * math.cos(lam), math.cos(phi) * math.sin(lam), math.sin(phi)])


def great_circle_km(a: GeoPoint, b: GeoPoint, radius: float = EARTH_RADIUS_KM) -> float:
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dphi = p2 - p1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2) ** 2
    return 2.0 * radius * math.asin(min(1.0, math.sqrt(h)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return (
        (d1 == 0 and on_segment(q1, q2, p1))
        or (d2 == 0 and on_segment(q1, q2, p2))
        or (d3 == 0 and on_segment(p1, p2, q1))
        or (d4 == 0 and on_segment(p1, p2, q2))
    )


def shoelace(poly: Sequence[tuple[float, float]]) -> float:
    """Signed planar area (positive for clockwise rings in the y-down plane)."""
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


@dataclass(frozen=True)
class Footprint:
    """Ground extent of an image, four corners in NW, NE, SE, SW order.

    Construction validates the quadrilateral: simple, non-degenerate, and
    not crossing the antimeridian (edges may end on lon = +-180).
    """

    corners: tuple[GeoPoint, GeoPoint, GeoPoint, GeoPoint]

    def __post_init__(self):
        if len(self.corners) != 4:
            raise GeometryError(f"footprint needs 4 corners, got {len(self.corners)}")
        for a, b in zip(self.corners, self.corners[1:] + self.corners[:1]):
            if abs(a.lon - b.lon) > 180.0 and abs(a.lon) != 180.0 and abs(b.lon) != 180.0:
                raise GeometryError("footprint crosses the antimeridian")
        pts = self.xy
        if _segments_intersect(pts[0], pts[1], pts[2], pts[3]) or _segments_intersect(pts[1], pts[2], pts[3], pts[0]):
            raise DegenerateGeometryError("footprint is self-intersecting")
        if self.planar_area == 0.0:
            raise DegenerateGeometryError("footprint has zero area")

    @classmethod
    def from_latlon(cls, corners: Iterable[Sequence[float]]) -> "Footprint":
        return cls(tuple(GeoPoint(float(lat), float(lon)) for lat, lon in corners))

    @classmethod
    def from_bounds(cls, south: float, west: float, north: float, east: float) -> "Footprint":
        return cls.from_latlon([(north, west), (north, east), (south, east), (south, west)])

    def to_latlon(self) -> list[list[float]]:
        return [[c.lat, c.lon] for c in self.corners]

    @cached_property
    def xy(self) -> tuple[tuple[float, float], ...]:
        return tuple(c.xy for c in self.corners)

    @cached_property
    def planar_area(self) -> float:
        return abs(shoelace(self.xy))

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.xy]
        ys = [p[1] for p in self.xy]
        return min(xs), min(ys), max(xs), max(ys)

    @cached_property
    def is_convex(self) -> bool:
        pts = self.xy
        signs = [_cross(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]) for i in range(4)]
        return all(s >= 0 for s in signs) or all(s <= 0 for s in signs)

    @cached_property
    def centroid(self) -> GeoPoint:
        v = sum(c.unit_vector() for c in self.corners)
        v = v / np.linalg.norm(v)
        return GeoPoint(math.degrees(math.asin(max(-1.0, min(1.0, v[2])))), math.degrees(math.atan2(v[1], v[0])))

    def reversed(self) -> "Footprint":
        return Footprint(tuple(reversed(self.corners)))

    def contains(self, p: GeoPoint) -> bool:
        return point_in_polygon(p.xy, self.xy)


def point_in_polygon(pt: tuple[float, float], poly: Sequence[tuple[float, float]]) -> bool:
    """Even-odd test; points on the boundary count as inside."""
    x, y = pt
    n = len(poly)
    inside = False
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if _cross(a, b, pt) == 0 and min(a[0], b[0]) <= x <= max(a[0], b[0]) and min(a[1], b[1]) <= y <= max(a[1], b[1]):
            return True
        if (a[1] > y) != (b[1] > y):
            xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x < xc:
                inside = not inside
    return inside


# --- areas -----------------------------------------------------------------


def _mercator_ordinate(lat: float) -> float:
    return math.asinh(math.tan(math.radians(lat)))


def footprint_area_sqkm(f: Footprint, radius: float = EARTH_RADIUS_KM) -> float:
    """Area enclosed by the footprint's rhumb-line edges on the sphere.

    Integrates sin(lat) dlon along each edge; with the Mercator ordinate Y
    linear in lon, sin(lat) = tanh(Y) integrates to log cosh in closed form.
    """
    total = 0.0
    for a, b in zip(f.corners, f.corners[1:] + f.corners[:1]):
        dlam = math.radians(b.lon - a.lon)
        if dlam == 0.0:
            continue
        y1, y2 = _mercator_ordinate(a.lat), _mercator_ordinate(b.lat)
        dy = y2 - y1
        if abs(dy) < 1e-9:
            total += dlam * math.tanh(0.5 * (y1 + y2))
        else:
            total += dlam * (math.log(math.cosh(y2)) - math.log(math.cosh(y1))) / dy
    area = abs(total) * radius**2
    if area == 0.0:
        raise DegenerateGeometryError("footprint has zero area")
    return area


# --- clipping / IoU -------------------------------------------------------


def _clip(subject: list, clip: Sequence[tuple[float, float]]) -> list:
    """Sutherland-Hodgman; ``clip`` must be convex and counter-clockwise in (x, y)."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0
            if cur_in != prev_in:
                # intersection of prev->cur with the clip line a->b
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                ex, ey = b[0] - a[0], b[1] - a[1]
                den = dx * ey - dy * ex
                t = ((a[0] - prev[0]) * ey - (a[1] - prev[1]) * ex) / den
                out.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return out


def _ccw(poly: Sequence[tuple[float, float]]) -> list:
    return list(poly) if shoelace(poly) > 0 else list(reversed(poly))


def _convex_pieces(f: Footprint) -> list[list]:
    pts = f.xy
    if f.is_convex:
        return [_ccw(pts)]
    # the interior diagonal separates the other two corners
    if _cross(pts[0], pts[2], pts[1]) * _cross(pts[0], pts[2], pts[3]) < 0:
        tris = [(pts[0], pts[1], pts[2]), (pts[0], pts[2], pts[3])]
    else:
        tris = [(pts[1], pts[2], pts[3]), (pts[1], pts[3], pts[0])]
    return [_ccw(t) for t in tris]


def _bbox_disjoint(a: Footprint, b: Footprint) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox
    bx0, by0, bx1, by1 = b.bbox
    return ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0


def intersection_area(a: Footprint, b: Footprint) -> float:
    """Planar (Mercator) area of the intersection of two footprints."""
    if _bbox_disjoint(a, b):
        return 0.0
    subject = list(a.xy)
    inter = sum(abs(shoelace(_clip(subject, piece))) for piece in _convex_pieces(b))
    if inter <= 1e-12 * min(a.planar_area, b.planar_area):
        return 0.0
    return inter


def footprint_iou(a: Footprint, b: Footprint) -> float:
    if a == b or sorted(a.xy) == sorted(b.xy):
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.planar_area + b.planar_area - inter
    return min(1.0, inter / union)


def footprints_overlap(a: Footprint, b: Footprint) -> bool:
    return footprint_iou(a, b) > 0.0


# --- tiles ------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class TileId:
    """Slippy-map tile, optionally on a grid shifted by half a tile.

    Shifted grids start at index -1 along the shifted axis; tiles hanging
    over the map edge are clipped to it, so every point sees exactly one
    tile per grid.
    """

    zoom: int
    x: int
    y: int
    offset: str = "none"

    def __post_init__(self):
        if self.offset not in _OFFSET_SHIFT:
            raise InvalidTileError(f"unknown offset {self.offset!r}")
        if not 0 <= self.zoom <= MAX_ZOOM:
            raise InvalidTileError(f"zoom {self.zoom} outside [0, {MAX_ZOOM}]")
        n = 1 << self.zoom
        sx, sy = _OFFSET_SHIFT[self.offset]
        lo_x = -1 if sx else 0
        lo_y = -1 if sy else 0
        if not (lo_x <= self.x < n and lo_y <= self.y < n):
            raise InvalidTileError(f"tile ({self.x}, {self.y}) out of range at zoom {self.zoom} ({self.offset})")

    @property
    def bounds_xy(self) -> tuple[float, float, float, float]:
        n = 1 << self.zoom
        sx, sy = _OFFSET_SHIFT[self.offset]
        x0 = max(0.0, (self.x + sx) / n)
        x1 = min(1.0, (self.x + 1 + sx) / n)
        y0 = max(0.0, (self.y + sy) / n)
        y1 = min(1.0, (self.y + 1 + sy) / n)
        return x0, y0, x1, y1


def tile_footprint(tile: TileId) -> Footprint:
    x0, y0, x1, y1 = tile.bounds_xy
    north, south = y_to_lat(y0), y_to_lat(y1)
    west, east = x_to_lon(x0), x_to_lon(x1)
    return Footprint.from_bounds(south, west, north, east)


def tile_contains(tile: TileId, p: GeoPoint) -> bool:
    x0, y0, x1, y1 = tile.bounds_xy
    x, y = p.xy
    return x0 <= x <= x1 and y0 <= y <= y1


def covering_tiles(p: GeoPoint, zoom: int) -> list[TileId]:
    """The four tiles (one per grid offset) containing ``p``.

    A point on a tile edge goes to the tile east/south of it.
    """
    if not 0 <= zoom <= MAX_ZOOM:
        raise InvalidTileError(f"zoom {zoom} outside [0, {MAX_ZOOM}]")
    n = 1 << zoom
    x, y = lon_to_x(wrap_lon(p.lon)), lat_to_y(p.lat)
    tiles = []
    for offset in OFFSETS:
        sx, sy = _OFFSET_SHIFT[offset]
        tx = min(math.floor(x * n - sx), n - 1)
        ty = min(max(math.floor(y * n - sy), -1 if sy else 0), n - 1)
        tiles.append(TileId(zoom, tx, ty, offset))
    return tiles


def candidate_positives(weak: GeoPoint, zooms: Iterable[int] = DEFAULT_ZOOMS) -> list[tuple[TileId, int]]:
    """Every (tile, rotation) that could show the weakly-labelled point: zooms x 4 covers x 4 rotations."""
    covers = [t for z in dict.fromkeys(zooms) for t in covering_tiles(weak, z)]
    return list(itertools.product(covers, ROTATIONS))


def region_filter(
    nadir: GeoPoint, footprints: Sequence[Footprint], r_vis_km: float = DEFAULT_R_VIS_KM
) -> list[int]:
    """Indices of footprints whose centroid lies within ``r_vis_km`` of the nadir."""
    if not footprints:
        return []
    centroids = np.array([f.centroid.unit_vector() for f in footprints])
    cos_dist = np.clip(centroids @ nadir.unit_vector(), -1.0, 1.0)
    dist = EARTH_RADIUS_KM * np.arccos(cos_dist)
    return [int(i) for i in np.flatnonzero(dist <= r_vis_km)]


def bbox_array(footprints: Sequence[Footprint]) -> np.ndarray:
    """(n, 4) array of Mercator bounding boxes, for vectorized overlap prefilters."""
    if not footprints:
        return np.zeros((0, 4))
    return np.array([f.bbox for f in footprints], dtype=np.float64)


def bbox_hits(boxes: np.ndarray, box: Sequence[float]) -> np.ndarray:
    """Boolean mask of rows in ``boxes`` whose interior may meet ``box``."""
    x0, y0, x1, y1 = box
    return (boxes[:, 0] < x1) & (x0 < boxes[:, 2]) & (boxes[:, 1] < y1) & (y0 < boxes[:, 3])
