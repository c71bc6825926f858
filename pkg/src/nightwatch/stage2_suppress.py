"""Rule-based removal of known non-vessel light sources.

Every rule returns the full candidate list in input order, adding a
:class:`SuppressionFlag` to the candidates it rejects.  Rules read only
candidate attributes and the frame, never earlier flags, so the final
kept set does not depend on rule order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binom

from .geo import GeoPoint, GeoPolygon, haversine_array
from .raster_io import RasterFrame
from .stage1_detect import LightCandidate

LAND = "LAND"
GAS_FLARE = "GAS_FLARE"
MOONLIT_CLOUD = "MOONLIT_CLOUD"
AURORA = "AURORA"
SAA = "SAA"
SCANLINE = "SCANLINE"
NOISE_SMILE = "NOISE_SMILE"
RULE_ORDER = (LAND, GAS_FLARE, SAA, SCANLINE, NOISE_SMILE, MOONLIT_CLOUD, AURORA)

# Rough South Atlantic Anomaly footprint; operators are expected to tune it.
DEFAULT_SAA_VERTICES = [(-50.0, -90.0), (0.0, -90.0), (0.0, 40.0), (-50.0, 40.0)]


def default_saa_polygon() -> GeoPolygon:
    return GeoPolygon(DEFAULT_SAA_VERTICES, name="south_atlantic_anomaly")


@dataclass(frozen=True)
class FlareSite:
    geo: GeoPoint
    radius_m: float = 1000.0

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError("flare radius_m must be positive")


class FlareGazetteer:
    """Static list of known gas-flare sites."""

    def __init__(self, sites=()):
        self.sites = [s if isinstance(s, FlareSite) else FlareSite(*s) for s in sites]

    def __len__(self):
        return len(self.sites)

    @classmethod
    def load(cls, path) -> "FlareGazetteer":
        """Read a JSON list of ``{"lat", "lon", "radius_m"}`` objects."""
        data = json.loads(Path(path).read_text())
        return cls.from_list(data)

    @classmethod
    def from_list(cls, data) -> "FlareGazetteer":
        return cls(FlareSite(GeoPoint(d["lat"], d["lon"]), float(d.get("radius_m", 1000.0)))
                   for d in data)

    def to_list(self):
        return [{"lat": s.geo.lat, "lon": s.geo.lon, "radius_m": s.radius_m} for s in self.sites]


def _pixels(cands, plane):
    if not cands:
        return np.zeros(0)
    rr = np.fromiter((c.row for c in cands), dtype=np.int64, count=len(cands))
    cc = np.fromiter((c.col for c in cands), dtype=np.int64, count=len(cands))
    return plane[rr, cc]


def _apply(cands, hit, rule, detail):
    return [c.with_flag(rule, detail) if h else c for c, h in zip(cands, hit)]


def _need(frame: RasterFrame, *names):
    missing = [n for n in names if not frame.has_channel(n)]
    if missing:
        raise ValueError(f"frame {frame.frame_id!r} lacks channel(s) {missing}")


def mask_land(cands, frame: RasterFrame):
    _need(frame, "land_mask")
    hit = _pixels(cands, frame.channel("land_mask")) >= 0.5
    return _apply(cands, hit, LAND, "land_mask")


def suppress_gas_flares(cands, gazetteer: FlareGazetteer, frame: RasterFrame | None = None,
                        thermal_thresh: float | None = None):
    """Flag candidates within a gazetteer radius (inclusive) of a flare site.

    If the frame carries a ``thermal`` channel and ``thermal_thresh`` is set,
    candidates on hot pixels are flagged too.
    """
    out = list(cands)
    if not out:
        return out
    if len(gazetteer):
        lat = np.array([c.geo.lat for c in out])[:, None]
        lon = np.array([c.geo.lon for c in out])[:, None]
        slat = np.array([s.geo.lat for s in gazetteer.sites])[None, :]
        slon = np.array([s.geo.lon for s in gazetteer.sites])[None, :]
        rad = np.array([s.radius_m for s in gazetteer.sites])[None, :]
        hit = (haversine_array(lat, lon, slat, slon) <= rad).any(axis=1)
        out = _apply(out, hit, GAS_FLARE, "gazetteer")
    if frame is not None and thermal_thresh is not None and frame.has_channel("thermal"):
        hot = _pixels(out, frame.channel("thermal")) >= thermal_thresh
        out = _apply(out, hot, GAS_FLARE, "thermal")
    return out


def suppress_moonlit_clouds(cands, frame: RasterFrame, moon_thresh=0.5, cloud_thresh=0.5,
                            snr_keep=10.0):
    _need(frame, "moonlight", "cloud_mask")
    cloud = _pixels(cands, frame.channel("cloud_mask"))
    moon = _pixels(cands, frame.channel("moonlight"))
    snr = np.array([c.snr for c in cands])
    hit = (cloud >= cloud_thresh) & (moon >= moon_thresh) & (snr < snr_keep)
    return _apply(cands, hit, MOONLIT_CLOUD, "cloud+moon")


def diffuseness(c: LightCandidate) -> float:
    """Ring background relative to the peak; ~0 for point sources on dark water."""
    if c.peak_radiance <= 0:
        return 0.0
    return c.local_background / c.peak_radiance


def suppress_aurora(cands, frame: RasterFrame | None = None, lat_gate_deg=55.0,
                    diffuseness_thresh=0.5):
    hit = [abs(c.geo.lat) >= lat_gate_deg and diffuseness(c) >= diffuseness_thresh
           for c in cands]
    return _apply(cands, hit, AURORA, "diffuse high-latitude glow")


def suppress_saa(cands, saa_polygon: GeoPolygon, snr_keep=10.0):
    hit = [c.snr < snr_keep and saa_polygon.contains(c.geo) for c in cands]
    return _apply(cands, hit, SAA, saa_polygon.name or "saa")


def scanline_pvalues(cands, n_rows: int, bonferroni: bool = True) -> dict:
    """Per-row probability of at least k of n candidates landing on that row.

    Under the null each candidate picks a row uniformly, so the row count is
    Binomial(n, 1/n_rows).  With ``bonferroni`` the tail is multiplied by
    the number of rows tested.
    """
    n = len(cands)
    counts = Counter(c.row for c in cands)
    out = {}
    for row, k in counts.items():
        p = float(binom.sf(k - 1, n, 1.0 / n_rows))
        out[row] = min(1.0, p * n_rows) if bonferroni else p
    return out


def scanline_test(cands, frame: RasterFrame, p_value_thresh=1e-3, bonferroni=True):
    pvals = scanline_pvalues(cands, frame.height, bonferroni)
    bad = {r for r, p in pvals.items() if p < p_value_thresh}
    return [c.with_flag(SCANLINE, f"row {c.row} p={pvals[c.row]:.3g}") if c.row in bad else c
            for c in cands]


def suppress_noise_smile(cands, frame: RasterFrame, edge_margin_px=60, snr_keep=10.0):
    w = frame.width
    hit = [(c.col < edge_margin_px or c.col >= w - edge_margin_px) and c.snr < snr_keep
           for c in cands]
    return _apply(cands, hit, NOISE_SMILE, "along-scan edge")


@dataclass
class Stage2Config:
    moon_thresh: float = 0.5
    cloud_thresh: float = 0.5
    moonlit_snr_keep: float = 10.0
    aurora_lat_gate_deg: float = 55.0
    aurora_diffuseness_thresh: float = 0.5
    saa_snr_keep: float = 10.0
    scanline_p_value: float = 1e-3
    scanline_bonferroni: bool = True
    edge_margin_px: int = 60
    noise_smile_snr_keep: float = 12.0
    thermal_thresh: float | None = None
    gazetteer: FlareGazetteer = field(default_factory=FlareGazetteer)
    saa_polygon: GeoPolygon = field(default_factory=default_saa_polygon)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "Stage2Config":
        d = dict(d)
        gaz = d.pop("gazetteer", None)
        gaz_path = d.pop("gazetteer_path", None)
        saa = d.pop("saa_polygon", None)
        cfg = cls(**d)
        if gaz_path is not None:
            p = Path(gaz_path)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            cfg.gazetteer = FlareGazetteer.load(p)
        elif gaz is not None:
            cfg.gazetteer = FlareGazetteer.from_list(gaz)
        if saa is not None:
            cfg.saa_polygon = GeoPolygon.from_dict(saa)
        return cfg

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("gazetteer", "saa_polygon")}
        d["gazetteer"] = self.gazetteer.to_list()
        d["saa_polygon"] = self.saa_polygon.to_dict()
        return d


def apply_rule(rule: str, cands, frame: RasterFrame, config: Stage2Config):
    if rule == LAND:
        return mask_land(cands, frame)
    if rule == GAS_FLARE:
        return suppress_gas_flares(cands, config.gazetteer, frame, config.thermal_thresh)
    if rule == SAA:
        return suppress_saa(cands, config.saa_polygon, config.saa_snr_keep)
    if rule == SCANLINE:
        return scanline_test(cands, frame, config.scanline_p_value, config.scanline_bonferroni)
    if rule == NOISE_SMILE:
        return suppress_noise_smile(cands, frame, config.edge_margin_px,
                                    config.noise_smile_snr_keep)
    if rule == MOONLIT_CLOUD:
        return suppress_moonlit_clouds(cands, frame, config.moon_thresh, config.cloud_thresh,
                                       config.moonlit_snr_keep)
    if rule == AURORA:
        return suppress_aurora(cands, frame, config.aurora_lat_gate_deg,
                               config.aurora_diffuseness_thresh)
    raise ValueError(f"unknown rule {rule!r}")


def run_stage2(cands, frame: RasterFrame, config: Stage2Config | None = None,
               order=RULE_ORDER):
    """Apply every rule; returns (kept, suppressed) with flags retained for audit."""
    config = config or Stage2Config()
    flagged = list(cands)
    for rule in order:
        flagged = apply_rule(rule, flagged, frame, config)
    kept = [c for c in flagged if not c.flags]
    suppressed = [c for c in flagged if c.flags]
    return kept, suppressed
