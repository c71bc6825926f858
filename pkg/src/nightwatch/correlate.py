"""Match image detections to AIS positions at frame time."""

from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .assignment import solve_lap
from .geo import EARTH_RADIUS_M, GeoPoint, normalize_lon, pairwise_haversine
from .raster_io import format_time, parse_time

KNOT_MPS = 1852.0 / 3600.0


@dataclass(frozen=True)
class AisPosition:
    vessel_id: str
    timestamp: datetime
    geo: GeoPoint
    speed_over_ground: float | None = None  # m/s
    course: float | None = None  # degrees

    @classmethod
    def from_json(cls, d: dict) -> "AisPosition":
        sog = d.get("sog_knots")
        return cls(vessel_id=str(d["mmsi"]), timestamp=parse_time(d["ts"]),
                   geo=GeoPoint(d["lat"], d["lon"]),
                   speed_over_ground=None if sog is None else float(sog) * KNOT_MPS,
                   course=d.get("cog_deg"))

    def to_json(self) -> dict:
        return {
            "mmsi": self.vessel_id,
            "ts": format_time(self.timestamp),
            "lat": self.geo.lat,
            "lon": self.geo.lon,
            "sog_knots": None if self.speed_over_ground is None
            else self.speed_over_ground / KNOT_MPS,
            "cog_deg": self.course,
        }


def read_ais(path) -> list[AisPosition]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(AisPosition.from_json(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: bad AIS record ({exc})") from None
    return out


def write_ais(positions, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in positions:
            fh.write(json.dumps(p.to_json()) + "\n")
    return path


def group_tracks(positions) -> dict:
    """vessel_id -> time-ordered list of reports."""
    tracks = {}
    for p in positions:
        tracks.setdefault(p.vessel_id, []).append(p)
    for t in tracks.values():
        t.sort(key=lambda p: p.timestamp)
    return tracks


def destination_point(start: GeoPoint, bearing_deg: float, distance_m: float) -> GeoPoint:
    """Point reached travelling ``distance_m`` along a great circle."""
    lat1, lon1 = math.radians(start.lat), math.radians(start.lon)
    brg = math.radians(bearing_deg)
    d = distance_m / EARTH_RADIUS_M
    lat2 = math.asin(math.sin(lat1) * math.cos(d) + math.cos(lat1) * math.sin(d) * math.cos(brg))
    lon2 = lon1 + math.atan2(math.sin(brg) * math.sin(d) * math.cos(lat1),
                             math.cos(d) - math.sin(lat1) * math.sin(lat2))
    return GeoPoint(math.degrees(lat2), math.degrees(lon2))


def position_at(track, t, max_extrapolation_s: float = 3600.0):
    """(GeoPoint, seconds to the nearest report) at time ``t``, or None.

    Inside the track span the position is interpolated linearly in lat/lon
    (longitude unwrapped across the antimeridian).  Outside the span it is
    clamped to the nearest endpoint if within ``max_extrapolation_s``.
    """
    if not track:
        raise ValueError("empty track")
    times = [p.timestamp.timestamp() for p in track]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("track is not sorted by time")
    t = parse_time(t).timestamp()
    if t <= times[0] or t >= times[-1]:
        end = track[0] if t <= times[0] else track[-1]
        offset = abs(t - end.timestamp.timestamp())
        if offset > max_extrapolation_s:
            return None
        return end.geo, offset
    k = bisect.bisect_left(times, t)
    if times[k] == t:
        return track[k].geo, 0.0
    a, b = track[k - 1], track[k]
    f = (t - times[k - 1]) / (times[k] - times[k - 1])
    dlon = normalize_lon(b.geo.lon - a.geo.lon)
    geo = GeoPoint(a.geo.lat + f * (b.geo.lat - a.geo.lat), a.geo.lon + f * dlon)
    return geo, min(t - times[k - 1], times[k] - t)


def interpolate_track(track, t, max_extrapolation_s: float = 3600.0) -> GeoPoint | None:
    hit = position_at(track, t, max_extrapolation_s)
    return None if hit is None else hit[0]


def build_cost_matrix(detections, ais_points, gate_m) -> np.ndarray:
    """Haversine distances with entries beyond the gate set to NaN (forbidden).

    ``gate_m`` is a scalar or one radius per AIS point.
    """
    gate = np.broadcast_to(np.asarray(gate_m, dtype=np.float64), (len(ais_points),))
    if np.any(gate <= 0):
        raise ValueError("gate radius must be positive")
    d = pairwise_haversine(list(detections), list(ais_points))
    return np.where(d <= gate[None, :], d, np.nan)


@dataclass(frozen=True)
class GateParams:
    base_uncertainty_m: float = 1500.0
    max_speed_mps: float = 12.86
    max_extrapolation_s: float = 3600.0

    def radius(self, dt_s: float) -> float:
        return self.base_uncertainty_m + self.max_speed_mps * abs(dt_s)


@dataclass
class CorrelationResult:
    matches: list = field(default_factory=list)   # (detection_id, vessel_id, distance_m)
    dark_detections: list = field(default_factory=list)
    unmatched_ais: list = field(default_factory=list)
    total_cost: float = 0.0

    def by_detection(self) -> dict:
        return {d: (v, m) for d, v, m in self.matches}


def correlate(detections, tracks, frame_time, gate: GateParams | None = None,
              detection_ids=None) -> CorrelationResult:
    """Optimal one-to-one matching of detections to AIS tracks at ``frame_time``.

    Args:
        detections: GeoPoints (or objects with a ``geo`` attribute).
        tracks: mapping vessel_id -> reports, or a flat list of AisPosition.
        frame_time: image acquisition time.
        gate: gating parameters; each track's gate grows with its time offset.
        detection_ids: ids reported in the result (default: list indices).
    """
    gate = gate or GateParams()
    if not isinstance(tracks, dict):
        tracks = group_tracks(tracks)
    points = [getattr(d, "geo", d) for d in detections]
    ids = list(detection_ids) if detection_ids is not None else list(range(len(points)))
    vessel_ids, ais_points, radii = [], [], []
    for vid in sorted(tracks):
        hit = position_at(tracks[vid], frame_time, gate.max_extrapolation_s)
        if hit is None:
            continue
        vessel_ids.append(vid)
        ais_points.append(hit[0])
        radii.append(gate.radius(hit[1]))
    if not points or not ais_points:
        return CorrelationResult(dark_detections=ids, unmatched_ais=vessel_ids)
    costs = build_cost_matrix(points, ais_points, radii)
    result = solve_lap(costs)
    matches = [(ids[i], vessel_ids[j], float(costs[i, j])) for i, j in result.pairs]
    return CorrelationResult(
        matches=matches,
        dark_detections=[ids[i] for i in result.unmatched_rows],
        unmatched_ais=[vessel_ids[j] for j in result.unmatched_cols],
        total_cost=result.total_cost,
    )


class AisStore:
    """Thread-safe AIS position store with copy-on-write snapshots."""

    def __init__(self, positions=()):
        self._lock = threading.Lock()
        self._tracks = {}
        self.add(positions)

    def add(self, positions) -> int:
        positions = list(positions)
        with self._lock:
            tracks = {k: list(v) for k, v in self._tracks.items()}
            for p in positions:
                tracks.setdefault(p.vessel_id, []).append(p)
            for k in {p.vessel_id for p in positions}:
                tracks[k].sort(key=lambda p: p.timestamp)
            self._tracks = tracks
        return len(positions)

    def snapshot(self) -> dict:
        with self._lock:
            return self._tracks

    def __len__(self):
        return sum(len(v) for v in self.snapshot().values())
