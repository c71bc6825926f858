"""Deterministic synthetic night-lights frames with ground truth.

All randomness comes from one ``numpy.random.Generator`` on the PCG64 bit
generator seeded with ``SceneSpec.seed``; draws happen in a fixed order so
a spec always produces the same bytes.

Injected light sources and the suppression rule expected to catch them:

============== ===================== =====================================
kind           rule                  injection
============== ===================== =====================================
vessel         (kept)                1 px, or 2 px horizontal pair
flare          GAS_FLARE             bright point + gazetteer entry
infrastructure INFRASTRUCTURE        lit platform + infrastructure entry
aurora         AURORA                knot embedded in a high-latitude glow
streak         SCANLINE              single-row bright run
noise_smile    NOISE_SMILE           faint spike in the along-scan edges
cloud          MOONLIT_CLOUD         faint glint under a moonlit cloud
saa            SAA                   faint particle hit
land_light     LAND                  light on a land pixel
============== ===================== =====================================
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy import ndimage

from .correlate import AisPosition, destination_point
from .geo import EARTH_RADIUS_M, GeoPoint, GeoPolygon
from .raster_io import CHANNELS, RasterFrame, affine_for_center, parse_time, pixel_to_latlon

MAX_PLACEMENT_ATTEMPTS = 1000

ARTIFACT_RULES = {
    "flare": "GAS_FLARE",
    "infrastructure": "INFRASTRUCTURE",
    "aurora": "AURORA",
    "streak": "SCANLINE",
    "noise_smile": "NOISE_SMILE",
    "cloud": "MOONLIT_CLOUD",
    "saa": "SAA",
    "land_light": "LAND",
}


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    """Recipe for one synthetic frame; radiances are in nanowatts/cm^2/sr."""

    seed: int = 0
    width: int = 1024
    height: int = 1024
    center_lat: float = 35.0
    center_lon: float = -40.0
    acquired_at: str = "2023-10-01T01:30:00Z"
    frame_id: str | None = None
    satellite_id: str = "NOAA20"
    pixel_size_m: float = 750.0
    background: float = 0.0
    background_noise_sigma: float = 1.0

    vessel_count: int = 20
    vessel_intensity_range: tuple = (15.0, 60.0)
    pair_fraction: float = 0.3
    min_separation_px: int = 10
    vessel_edge_clearance_px: int = 80

    flare_count: int = 0
    flare_intensity_range: tuple = (40.0, 120.0)
    flare_radius_m: float = 1000.0
    infrastructure_count: int = 0
    infrastructure_intensity_range: tuple = (20.0, 60.0)
    infrastructure_radius_m: float = 500.0

    aurora_band: tuple | None = None  # (lat_min, lat_max)
    aurora_amplitude: float = 25.0
    aurora_knot_count: int = 8
    aurora_knot_amplitude_range: tuple = (8.0, 12.0)

    streak_count: int = 0
    streak_length_range: tuple = (40, 120)
    streak_intensity_range: tuple = (10.0, 20.0)

    noise_smile: bool = False
    smile_width_px: int = 40
    smile_sigma_factor: float = 1.5
    smile_spike_count: int = 6

    cloud_cover: float = 0.0
    moonlight: float = 0.0
    cloud_brightness: float = 3.0
    cloud_glint_count: int = 6

    saa_hit_count: int = 0
    faint_artifact_range: tuple = (6.5, 7.5)

    land_polygons: list = field(default_factory=list)
    land_light_count: int = 0
    land_light_intensity_range: tuple = (20.0, 80.0)

    def __post_init__(self):
        counts = ("vessel_count", "flare_count", "infrastructure_count", "aurora_knot_count",
                  "streak_count", "smile_spike_count", "cloud_glint_count", "saa_hit_count",
                  "land_light_count")
        for name in counts:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("vessel_intensity_range", "flare_intensity_range",
                     "infrastructure_intensity_range", "aurora_knot_amplitude_range",
                     "streak_intensity_range", "faint_artifact_range",
                     "land_light_intensity_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) range")
            setattr(self, name, (float(lo), float(hi)))
        if self.background_noise_sigma < 0:
            raise ValueError("background_noise_sigma must be >= 0")
        self.land_polygons = [p if isinstance(p, GeoPolygon) else GeoPolygon.from_dict(p)
                              for p in self.land_polygons]
        if self.frame_id is None:
            self.frame_id = f"synth-{self.seed}"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["land_polygons"] = [p.to_dict() for p in self.land_polygons]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class GroundTruth:
    frame_id: str
    records: list = field(default_factory=list)

    def vessels(self):
        return [r for r in self.records if r["kind"] == "vessel"]

    def artifacts(self):
        return [r for r in self.records if r["kind"] != "vessel"]

    def of_kind(self, kind):
        return [r for r in self.records if r["kind"] == kind]

    def gazetteer_entries(self):
        return [{"lat": r["lat"], "lon": r["lon"], "radius_m": r["radius_m"]}
                for r in self.of_kind("flare")]

    def infrastructure_entries(self):
        return [{"lat": r["lat"], "lon": r["lon"], "kind": "platform",
                 "radius_m": r["radius_m"]} for r in self.of_kind("infrastructure")]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path, frame_id="") -> "GroundTruth":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(frame_id=frame_id or (recs[0].get("frame_id", "") if recs else ""),
                   records=recs)


def _smooth_field(rng, shape, cells=16):
    """Zero-mean unit-variance smooth random field."""
    coarse = rng.standard_normal((cells, cells))
    f = ndimage.zoom(coarse, (shape[0] / cells, shape[1] / cells), order=3, mode="reflect")
    f = f[: shape[0], : shape[1]]
    return (f - f.mean()) / (f.std() or 1.0)


def _rasterize_polygons(polygons, geotransform, shape):
    """Even-odd fill of geo polygons in pixel space (affine frames)."""
    mask = np.zeros(shape, dtype=bool)
    if not polygons:
        return mask
    g = geotransform
    det = g[1] * g[5] - g[2] * g[4]
    rows = np.arange(shape[0], dtype=np.float64)[:, None]
    cols = np.arange(shape[1], dtype=np.float64)[None, :]
    for poly in polygons:
        pts = []
        for lon, lat in poly._ring:
            dlon, dlat = lon - g[0], lat - g[3]
            pts.append(((-g[4] * dlon + g[1] * dlat) / det, (g[5] * dlon - g[2] * dlat) / det))
        inside = np.zeros(shape, dtype=bool)
        for (r1, c1), (r2, c2) in zip(pts, pts[1:] + pts[:1]):
            if r1 == r2:
                continue
            crosses = (r1 > rows) != (r2 > rows)
            c_at = c1 + (rows - r1) * (c2 - c1) / (r2 - r1)
            inside ^= crosses & (cols < c_at)
        mask |= inside
    return mask


class _Placer:
    def __init__(self, rng, shape, sep):
        self.rng = rng
        self.h, self.w = shape
        self.sep = sep
        self.points = []
        self.segments = []  # (row, c0, c1)

    def clear(self, r, c, sep=None):
        sep = self.sep if sep is None else sep
        for pr, pc in self.points:
            if max(abs(pr - r), abs(pc - c)) < sep:
                return False
        for sr, c0, c1 in self.segments:
            dx = max(c0 - c, 0, c - c1)
            if max(abs(sr - r), dx) < sep:
                return False
        return True

    def place(self, ok, rows=None, cols=None, what="source"):
        """Rejection-sample a clear pixel; ``cols`` is a range or a list of ranges."""
        r_lo, r_hi = rows or (0, self.h)
        spans = cols if isinstance(cols, list) else [cols or (0, self.w)]
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = int(self.rng.integers(r_lo, r_hi))
            c_lo, c_hi = spans[int(self.rng.integers(len(spans)))] if len(spans) > 1 else spans[0]
            c = int(self.rng.integers(c_lo, c_hi))
            if ok(r, c) and self.clear(r, c):
                self.points.append((r, c))
                return r, c
        raise PlacementError(f"could not place {what} after {MAX_PLACEMENT_ATTEMPTS} attempts")


def generate_frame(spec: SceneSpec) -> tuple[RasterFrame, GroundTruth]:
    """Render ``spec`` into a 4-channel frame plus its ground truth."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    sigma = spec.background_noise_sigma
    gt = affine_for_center(spec.center_lat, spec.center_lon, w, h, spec.pixel_size_m)
    row_lat = gt[3] + np.arange(h) * gt[5]

    land = _rasterize_polygons(spec.land_polygons, gt, (h, w))

    if spec.cloud_cover > 0:
        f = _smooth_field(rng, (h, w))
        t = np.quantile(f, 1.0 - spec.cloud_cover)
        cloud = 1.0 / (1.0 + np.exp(-4.0 * (f - t)))
    else:
        cloud = np.zeros((h, w))
    moon = np.clip(spec.moonlight + 0.05 * np.linspace(-1, 1, w)[None, :]
                   * (spec.moonlight > 0), 0.0, 1.0) * np.ones((h, 1))

    glow = np.zeros((h, w))
    if spec.aurora_band is not None:
        lo, hi = sorted(spec.aurora_band)
        outside = np.maximum(lo - row_lat, 0) + np.maximum(row_lat - hi, 0)
        profile = np.exp(-0.5 * (outside / 0.3) ** 2)
        phase = rng.uniform(0, 2 * np.pi)
        ripple = 0.8 + 0.2 * np.sin(np.arange(w) / 150.0 + phase)
        glow = spec.aurora_amplitude * profile[:, None] * ripple[None, :]

    noise_scale = np.ones(w)
    if spec.noise_smile:
        d = np.minimum(np.arange(w), w - 1 - np.arange(w))
        noise_scale += (spec.smile_sigma_factor - 1) * np.clip(1 - d / spec.smile_width_px, 0, 1)
    rad = rng.standard_normal((h, w), dtype=np.float32) * np.float32(sigma)
    rad *= noise_scale[None, :].astype(np.float32)
    rad += np.float32(spec.background)
    rad += (glow + spec.cloud_brightness * cloud * moon).astype(np.float32)

    placer = _Placer(rng, (h, w), spec.min_separation_px)
    records = []

    def water(r, c):
        return not land[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2].any()

    def add(kind, r, c, intensity, **extra):
        rad[r, c] += np.float32(intensity)
        records.append({"kind": kind, "row": r, "col": c, "intensity": float(intensity), **extra})

    inner_rows = (8, h - 8)
    inner_cols = (spec.vessel_edge_clearance_px, w - spec.vessel_edge_clearance_px)

    for _ in range(spec.streak_count):
        length = int(rng.integers(spec.streak_length_range[0], spec.streak_length_range[1] + 1))
        length = min(length, w - 2 * inner_cols[0])
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            r = int(rng.integers(*inner_rows))
            c0 = int(rng.integers(inner_cols[0], inner_cols[1] - length + 1))
            if all(placer.clear(r, c) for c in (c0, c0 + length // 2, c0 + length - 1)):
                break
        else:
            raise PlacementError("could not place streak")
        level = rng.uniform(*spec.streak_intensity_range)
        run = level * (1.0 + 0.1 * rng.standard_normal(length))
        rad[r, c0:c0 + length] += run.astype(np.float32)
        placer.segments.append((r, c0, c0 + length - 1))
        records.append({"kind": "streak", "row": r, "col": c0 + length // 2,
                        "col_start": c0, "col_end": c0 + length - 1,
                        "intensity": float(level)})

    for _ in range(spec.flare_count):
        r, c = placer.place(water, inner_rows, inner_cols, "flare")
        add("flare", r, c, rng.uniform(*spec.flare_intensity_range),
            radius_m=spec.flare_radius_m)
    for _ in range(spec.infrastructure_count):
        r, c = placer.place(water, inner_rows, inner_cols, "infrastructure")
        add("infrastructure", r, c, rng.uniform(*spec.infrastructure_intensity_range),
            radius_m=spec.infrastructure_radius_m)

    if spec.aurora_band is not None and spec.aurora_knot_count:
        core = glow >= 0.7 * glow.max()
        yy, xx = np.mgrid[-3:4, -3:4]
        blob = np.exp(-0.5 * (yy ** 2 + xx ** 2) / 1.2 ** 2)
        for _ in range(spec.aurora_knot_count):
            r, c = placer.place(lambda r, c: core[r, c], (8, h - 8), inner_cols, "aurora knot")
            amp = rng.uniform(*spec.aurora_knot_amplitude_range)
            rad[r - 3:r + 4, c - 3:c + 4] += (amp * blob).astype(np.float32)
            records.append({"kind": "aurora", "row": r, "col": c, "intensity": float(amp)})

    if spec.cloud_glint_count and spec.cloud_cover > 0 and spec.moonlight > 0:
        lit = (cloud >= 0.7) & (moon >= 0.6)
        if lit.any():
            for _ in range(spec.cloud_glint_count):
                r, c = placer.place(lambda r, c: lit[r, c] and water(r, c),
                                    inner_rows, inner_cols, "cloud glint")
                add("cloud", r, c, rng.uniform(*spec.faint_artifact_range))

    for _ in range(spec.saa_hit_count):
        r, c = placer.place(water, inner_rows, inner_cols, "saa hit")
        add("saa", r, c, rng.uniform(*spec.faint_artifact_range))

    if spec.noise_smile:
        edge = spec.smile_width_px
        for _ in range(spec.smile_spike_count):
            r, c = placer.place(water, inner_rows, [(6, edge), (w - edge, w - 6)],
                                "noise-smile spike")
            add("noise_smile", r, c, rng.uniform(*spec.faint_artifact_range))

    if spec.land_light_count:
        if not land[8:h - 8, 8:w - 8].any():
            raise PlacementError("land lights requested but the frame has no land")
        for _ in range(spec.land_light_count):
            r, c = placer.place(lambda r, c: bool(land[r, c]), inner_rows, (8, w - 8),
                                "land light")
            add("land_light", r, c, rng.uniform(*spec.land_light_intensity_range))

    glow_limit = 0.5 * max(sigma, 1e-9)

    streak_rows = {sr for sr, _, _ in placer.segments}

    def vessel_ok(r, c):
        # a vessel sharing a streak's row sits inside the scan-line regime
        if any(abs(r - sr) <= 1 for sr in streak_rows):
            return False
        return water(r, c) and water(r, c + 1) and glow[r, c] < glow_limit

    for k in range(spec.vessel_count):
        r, c = placer.place(vessel_ok, inner_rows, inner_cols, "vessel")
        amp = rng.uniform(*spec.vessel_intensity_range)
        pair = rng.random() < spec.pair_fraction
        if pair:
            rad[r, c + 1] += np.float32(amp * rng.uniform(0.4, 0.8))
        add("vessel", r, c, amp, pixels=2 if pair else 1, mmsi=str(367_000_000 + k))

    planes = np.stack([rad, land.astype(np.float32), moon.astype(np.float32),
                       cloud.astype(np.float32)])
    frame = RasterFrame(frame_id=spec.frame_id, satellite_id=spec.satellite_id,
                        acquired_at=parse_time(spec.acquired_at), channels=CHANNELS,
                        planes=planes, geotransform=gt, pixel_size_m=spec.pixel_size_m)

    lat, lon = pixel_to_latlon(frame, [rec["row"] for rec in records],
                               [rec["col"] for rec in records])
    counters = {}
    for rec, la, lo in zip(records, lat, lon):
        n = counters.get(rec["kind"], 0)
        counters[rec["kind"]] = n + 1
        p = GeoPoint(float(la), float(lo))
        rec.update(id=f"{spec.frame_id}:{rec['kind']}:{n:03d}", frame_id=spec.frame_id,
                   lat=p.lat, lon=p.lon)
    records.sort(key=lambda rec: (rec["kind"] != "vessel", rec["id"]))
    return frame, GroundTruth(spec.frame_id, records)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def generate_ais(truth: GroundTruth, jitter_m: float = 200.0, dark_fraction: float = 0.3,
                 seed: int = 0, timestamp=None, frame_time=None) -> list[AisPosition]:
    """One AIS report per non-dark vessel, displaced by at most ``jitter_m``.

    The number of dark vessels is ``round(n * dark_fraction)`` rounding half
    away from zero.  Reports are stamped ``timestamp`` (defaults to
    ``frame_time`` or the epoch).
    """
    if not 0.0 <= dark_fraction <= 1.0:
        raise ValueError("dark_fraction must be within [0, 1]")
    rng = np.random.default_rng(seed)
    vessels = truth.vessels()
    n_dark = round_half_away(len(vessels) * dark_fraction)
    order = rng.permutation(len(vessels))
    dark = set(order[:n_dark].tolist())
    ts = parse_time(timestamp or frame_time or "1970-01-01T00:00:00Z")
    out = []
    for k, v in enumerate(vessels):
        bearing = rng.uniform(0.0, 360.0)
        dist = jitter_m * math.sqrt(rng.random())
        if k in dark:
            continue
        p = GeoPoint(v["lat"], v["lon"])
        if jitter_m > 0:
            p = destination_point(p, bearing, dist)
        out.append(AisPosition(vessel_id=v.get("mmsi", v["id"]), timestamp=ts, geo=p))
    return out


def dark_vessel_ids(truth: GroundTruth, ais) -> set:
    reported = {a.vessel_id for a in ais}
    return {v.get("mmsi", v["id"]) for v in truth.vessels()} - reported


def coastal_polygon(lat0, lon0, pixel_size_m=750.0, width=1024, height=1024):
    """A land mass occupying the western ~18% of a frame centred on (lat0, lon0)."""
    dlat = math.degrees(pixel_size_m / EARTH_RADIUS_M)
    dlon = dlat / math.cos(math.radians(lat0))
    west = lon0 - dlon * (width / 2 + 10)
    coast = lon0 - dlon * (width * 0.32)
    north = lat0 + dlat * (height / 2 + 10)
    south = lat0 - dlat * (height / 2 + 10)
    bay = lon0 - dlon * (width * 0.40)
    return GeoPolygon([(south, west), (north, west), (north, coast), (lat0, bay), (south, coast)],
                      name="coast")


def mixed_scene(seed: int, width: int = 1024, height: int = 1024, **overrides) -> SceneSpec:
    """Scenario mix cycling open ocean, aurora, SAA and coastal frames by seed.

    Every frame carries a scan-line streak, noise-smile edges and moonlit
    clouds; the regime adds flares/infrastructure, an aurora band, SAA
    particle hits, or a coastline with lit towns.
    """
    regime = seed % 4
    base = dict(seed=seed, width=width, height=height, streak_count=1, noise_smile=True,
                cloud_cover=0.35, moonlight=0.8, acquired_at=_stamp(seed))
    if regime == 0:
        base.update(center_lat=35.0, center_lon=-40.0, flare_count=2, infrastructure_count=2)
    elif regime == 1:
        base.update(center_lat=64.0, center_lon=5.0, aurora_band=(65.6, 66.8))
    elif regime == 2:
        base.update(center_lat=-25.0, center_lon=-35.0, saa_hit_count=8)
    else:
        lat0, lon0 = 28.0, -90.0
        base.update(center_lat=lat0, center_lon=lon0, flare_count=2, land_light_count=4,
                    land_polygons=[coastal_polygon(lat0, lon0, width=width, height=height)])
    base.update(overrides)
    return SceneSpec(**base)


def _stamp(seed):
    t = datetime(2023, 10, 1, 1, 30) + timedelta(hours=12 * seed)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")
