"""Suppress detections coincident with known fixed marine infrastructure."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_M, GeoPoint, haversine, haversine_array

CELL_DEG = 0.1
MAX_RADIUS_M = 5000.0
DEFAULT_RADIUS_M = 500.0
KINDS = ("wind_turbine", "platform", "other")
_LON_CELLS = int(round(360 / CELL_DEG))


@dataclass(frozen=True)
class InfrastructureEntry:
    geo: GeoPoint
    kind: str = "other"
    radius_m: float = DEFAULT_RADIUS_M

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown infrastructure kind {self.kind!r}")
        if not 0 < self.radius_m <= MAX_RADIUS_M:
            raise ValueError(f"radius_m must be in (0, {MAX_RADIUS_M}], got {self.radius_m}")


def _cell(lat, lon):
    return (math.floor(lat / CELL_DEG), math.floor((lon + 180.0) / CELL_DEG) % _LON_CELLS)


class InfrastructureIndex:
    """Uniform 0.1 degree grid over point entries for radius queries.

    Queries scan the neighbouring cells that can hold an entry within
    ``MAX_RADIUS_M``; the longitude span widens toward the poles and wraps
    at the antimeridian.
    """

    def __init__(self, entries=()):
        self.entries = list(entries)
        self._grid = {}
        for k, e in enumerate(self.entries):
            self._grid.setdefault(_cell(e.geo.lat, e.geo.lon), []).append(k)
        self._max_r = max((e.radius_m for e in self.entries), default=0.0)

    def __len__(self):
        return len(self.entries)

    def _cells_near(self, p: GeoPoint):
        reach = math.degrees(self._max_r / EARTH_RADIUS_M)
        ci, cj = _cell(p.lat, p.lon)
        di = math.ceil(reach / CELL_DEG) + 1
        lat_far = min(abs(p.lat) + reach + CELL_DEG, 90.0)
        cos_far = math.cos(math.radians(lat_far))
        if cos_far < 1e-6:
            dj = _LON_CELLS
        else:
            dj = math.ceil(reach / cos_far / CELL_DEG) + 1
        if 2 * dj + 1 >= _LON_CELLS:
            lon_cells = range(_LON_CELLS)
        else:
            lon_cells = [(cj + d) % _LON_CELLS for d in range(-dj, dj + 1)]
        for i in range(ci - di, ci + di + 1):
            for j in lon_cells:
                yield (i, j)

    def query(self, p: GeoPoint):
        """Entries whose radius (inclusive) covers ``p``, in index order."""
        if not self.entries:
            return []
        hits = []
        for cell in self._cells_near(p):
            for k in self._grid.get(cell, ()):
                e = self.entries[k]
                if haversine(p, e.geo) <= e.radius_m:
                    hits.append(k)
        return [self.entries[k] for k in sorted(hits)]

    def query_brute_force(self, p: GeoPoint):
        if not self.entries:
            return []
        lat = np.array([e.geo.lat for e in self.entries])
        lon = np.array([e.geo.lon for e in self.entries])
        r = np.array([e.radius_m for e in self.entries])
        d = haversine_array(p.lat, p.lon, lat, lon)
        return [self.entries[k] for k in np.nonzero(d <= r)[0]]


def parse_infrastructure_line(line: str) -> InfrastructureEntry:
    d = json.loads(line)
    return InfrastructureEntry(GeoPoint(d["lat"], d["lon"]), d.get("kind", "other"),
                               float(d.get("radius_m", DEFAULT_RADIUS_M)))


def load_infrastructure(path) -> InfrastructureIndex:
    """Read a JSON-lines infrastructure file; malformed lines raise with their number."""
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entries.append(parse_infrastructure_line(line))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: malformed infrastructure record: {exc}") from None
    return InfrastructureIndex(entries)


def write_infrastructure(entries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            if isinstance(e, InfrastructureEntry):
                e = {"lat": e.geo.lat, "lon": e.geo.lon, "kind": e.kind, "radius_m": e.radius_m}
            fh.write(json.dumps(e) + "\n")
    return path


def suppress_near_infrastructure(detections, index: InfrastructureIndex):
    """Split detections into (kept, suppressed).

    ``suppressed`` holds ``(detection, entry)`` pairs naming the first
    covering entry.  Detections are GeoPoints or objects with ``geo``.
    """
    kept, suppressed = [], []
    for d in detections:
        hits = index.query(getattr(d, "geo", d))
        if hits:
            suppressed.append((d, hits[0]))
        else:
            kept.append(d)
    return kept, suppressed
