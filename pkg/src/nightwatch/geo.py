"""Spherical geodesy: great-circle distance and polygon containment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EARTH_RADIUS_M = 6_371_008.8


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    return ((lon + 180.0) % 360.0) - 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def as_tuple(self):
        return (self.lat, self.lon)


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    # symmetric in a/b: sin^2 is even and the cos product commutes
    h = min(1.0, h)
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def haversine_array(lat1, lon1, lat2, lon2):
    """Vectorized haversine in meters; inputs broadcast like numpy arrays."""
    lat1 = np.radians(np.asarray(lat1, dtype=np.float64))
    lat2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dlat = lat2 - lat1
    dlon = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def pairwise_haversine(points_a, points_b) -> np.ndarray:
    """Distance matrix (len(a) x len(b)) in meters between two GeoPoint sequences."""
    if len(points_a) == 0 or len(points_b) == 0:
        return np.zeros((len(points_a), len(points_b)))
    la = np.array([p.lat for p in points_a])[:, None]
    oa = np.array([p.lon for p in points_a])[:, None]
    lb = np.array([p.lat for p in points_b])[None, :]
    ob = np.array([p.lon for p in points_b])[None, :]
    return haversine_array(la, oa, lb, ob)


def _unwrap(lons):
    out = [lons[0]]
    for lon in lons[1:]:
        d = lon - out[-1]
        d = ((d + 180.0) % 360.0) - 180.0
        out.append(out[-1] + d)
    return out


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


class GeoPolygon:
    """Closed ring of GeoPoints, tested for containment in unwrapped lon/lat space.

    Longitudes are unwrapped along the ring so polygons crossing the
    antimeridian stay contiguous; polygons enclosing a pole are not supported.
    """

    def __init__(self, vertices, name: str = ""):
        pts = [v if isinstance(v, GeoPoint) else GeoPoint(*v) for v in vertices]
        if len(pts) > 1 and pts[0] == pts[-1]:
            pts = pts[:-1]
        if len(set(p.as_tuple() for p in pts)) < 3:
            raise ValueError("polygon needs at least 3 distinct vertices")
        self.name = name
        self.vertices = tuple(pts)
        lons = _unwrap([p.lon for p in pts])
        if abs(lons[0] - _unwrap(lons + [lons[0]])[-1]) > 1e-9:
            raise ValueError("polygon ring winds around a pole")
        self._ring = [(lon, p.lat) for lon, p in zip(lons, pts)]
        self.crosses_antimeridian = max(lons) > 180.0 or min(lons) < -180.0
        self._min_lon = min(lons)
        n = len(self._ring)
        edges = [(self._ring[i], self._ring[(i + 1) % n]) for i in range(n)]
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(*edges[i], *edges[j]):
                    raise ValueError("polygon is self-intersecting")

    def __repr__(self):
        return f"GeoPolygon(name={self.name!r}, n={len(self.vertices)})"

    @classmethod
    def from_json(cls, path) -> "GeoPolygon":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data) -> "GeoPolygon":
        return cls([tuple(v) for v in data["vertices"]], name=data.get("name", ""))

    def to_dict(self):
        return {"name": self.name, "vertices": [[p.lat, p.lon] for p in self.vertices]}

    def contains(self, p: GeoPoint) -> bool:
        return contains(self, p)


def _on_segment(x, y, a, b, eps=1e-12):
    (x1, y1), (x2, y2) = a, b
    cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
    if abs(cross) > eps * max(1.0, abs(x2 - x1) + abs(y2 - y1)):
        return False
    return min(x1, x2) - eps <= x <= max(x1, x2) + eps and min(y1, y2) - eps <= y <= max(y1, y2) + eps


def contains(poly: GeoPolygon, p: GeoPoint) -> bool:
    """True iff ``p`` lies inside ``poly`` or on its boundary."""
    # the unwrapped ring spans less than 360 deg starting at _min_lon
    x = poly._min_lon + (p.lon - poly._min_lon) % 360.0
    if _contains_planar(poly._ring, x, p.lat):
        return True
    # a point a rounding error west of the ring wraps a full turn east
    if x - 360.0 >= poly._min_lon - 1e-9:
        return _contains_planar(poly._ring, x - 360.0, p.lat)
    return False


def _contains_planar(ring, x, y) -> bool:
    n = len(ring)
    inside = False
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        if _on_segment(x, y, a, b):
            return True
        (x1, y1), (x2, y2) = a, b
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def load_polygon(path) -> GeoPolygon:
    return GeoPolygon.from_json(path)
