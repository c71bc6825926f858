"""Unsupervised point-light extraction from the radiance channel.

The kernel is "centre minus ring median": at each local maximum the
background is the median of the pixels in an annulus
``ring_inner < r <= ring_outer`` around it, and the prominence is the
peak minus that background.  Maxima whose prominence reaches the threshold
go through greedy non-maximum suppression (brightest first).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geo import GeoPoint
from .raster_io import RasterFrame, pixel_to_latlon

_MEDIAN_CHUNK = 100_000
_SIGMA_SAMPLE = 1 << 20


@dataclass(frozen=True)
class Stage1Params:
    ring_inner: int = 2
    ring_outer: int = 5
    prominence_threshold: float = 4.5
    nms_window: int = 3
    sigma_estimator: str = "mad"

    def __post_init__(self):
        if not self.ring_outer > self.ring_inner >= 1:
            raise ValueError("need ring_outer > ring_inner >= 1")
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError("nms_window must be odd and positive")
        if self.sigma_estimator not in ("mad", "stddev"):
            raise ValueError(f"unknown sigma_estimator {self.sigma_estimator!r}")


@dataclass(frozen=True)
class SuppressionFlag:
    rule: str
    detail: str = ""

    def to_dict(self):
        return {"rule": self.rule, "detail": self.detail}


@dataclass(frozen=True)
class LightCandidate:
    row: int
    col: int
    geo: GeoPoint
    peak_radiance: float
    prominence: float
    local_background: float
    snr: float
    flags: tuple = ()
    confidence: float | None = None

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def rules(self) -> set:
        return {f.rule for f in self.flags}

    def with_flag(self, rule: str, detail: str = "") -> "LightCandidate":
        return replace(self, flags=self.flags + (SuppressionFlag(rule, detail),))


def ring_offsets(inner: int, outer: int) -> np.ndarray:
    """(dy, dx) offsets with inner < sqrt(dy^2 + dx^2) <= outer."""
    r = np.arange(-outer, outer + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    d2 = dy * dy + dx * dx
    keep = (d2 > inner * inner) & (d2 <= outer * outer)
    return np.stack([dy[keep], dx[keep]], axis=1)


def estimate_noise_sigma(frame: RasterFrame, estimator: str = "mad") -> float:
    """Pixel noise level of the radiance over valid water pixels.

    Works on horizontal first differences so smooth backgrounds (glow,
    moonlit cloud) do not inflate the estimate; a difference of two iid
    pixels has sqrt(2) times the pixel sigma.  Falls back to the standard
    deviation when the MAD is zero, and to 1.0 for a perfectly flat frame
    so SNRs stay finite.
    """
    rad = frame.radiance
    ok = np.isfinite(rad)
    if frame.has_channel("land_mask"):
        ok &= frame.channel("land_mask") < 0.5
    diff = (rad[:, 1:].astype(np.float64) - rad[:, :-1])[ok[:, 1:] & ok[:, :-1]]
    if diff.size > _SIGMA_SAMPLE:
        diff = diff[:: diff.size // _SIGMA_SAMPLE + 1]
    if diff.size == 0:
        return 1.0
    sigma = 0.0
    if estimator == "mad":
        sigma = 1.4826 * float(np.median(np.abs(diff - np.median(diff))))
    if sigma <= 0:
        sigma = float(np.std(diff))
    sigma /= np.sqrt(2.0)
    return sigma if sigma > 0 else 1.0


def _raw_candidates(rad: np.ndarray, params: Stage1Params, row_lo: int, row_hi: int):
    """Thresholded local maxima with rows in [row_lo, row_hi) (before NMS).

    ``rad`` is the full radiance plane; only a slab around the requested rows
    is filtered so tiles give the same answer as the whole frame.
    """
    h, w = rad.shape
    ro = params.ring_outer
    s0, s1 = max(row_lo - ro - 1, 0), min(row_hi + ro + 1, h)
    slab = rad[s0:s1]
    valid = np.isfinite(slab)
    hi = np.where(valid, slab, -np.inf)
    lo = np.where(valid, slab, np.inf)
    is_max = valid & (ndimage.maximum_filter(hi, size=3, mode="constant", cval=-np.inf) == hi)
    # median of ring >= min of the enclosing box, so this prefilter is exact
    box_min = ndimage.minimum_filter(lo, size=2 * ro + 1, mode="constant", cval=np.inf)
    with np.errstate(invalid="ignore"):
        keep = is_max & ((hi.astype(np.float64) - box_min) >= params.prominence_threshold)
    keep[: row_lo - s0] = False
    keep[row_hi - s0:] = False
    rr, cc = np.nonzero(keep)
    rr = rr + s0
    if rr.size == 0:
        empty = np.zeros(0)
        return rr, cc, empty, empty

    offs = ring_offsets(params.ring_inner, ro)
    padded = np.pad(rad, ro, mode="constant", constant_values=np.nan)
    peaks, backgrounds = [], []
    for k in range(0, rr.size, _MEDIAN_CHUNK):
        r = rr[k:k + _MEDIAN_CHUNK, None] + ro + offs[None, :, 0]
        c = cc[k:k + _MEDIAN_CHUNK, None] + ro + offs[None, :, 1]
        ring = padded[r, c].astype(np.float64)
        nan_count = np.isnan(ring).sum(axis=1)
        if nan_count.any():
            with np.errstate(all="ignore"):
                bg = np.nanmedian(ring, axis=1)
            bg[nan_count * 2 > offs.shape[0]] = np.nan
        else:
            bg = np.median(ring, axis=1)
        backgrounds.append(bg)
        peaks.append(rad[rr[k:k + _MEDIAN_CHUNK], cc[k:k + _MEDIAN_CHUNK]].astype(np.float64))
    peak = np.concatenate(peaks)
    bg = np.concatenate(backgrounds)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(bg) & ((peak - bg) >= params.prominence_threshold)
    return rr[ok], cc[ok], peak[ok], bg[ok]


def _nms(rr, cc, peak, window: int, shape):
    """Greedy suppression, brightest first; ties go to the lowest (row, col)."""
    order = np.lexsort((cc, rr, -peak))
    if window == 1:
        return order
    half = window // 2
    blocked = np.zeros(shape, dtype=bool)
    keep = []
    for k in order:
        r, c = rr[k], cc[k]
        if blocked[r, c]:
            continue
        keep.append(k)
        blocked[max(r - half, 0):r + half + 1, max(c - half, 0):c + half + 1] = True
    return np.asarray(keep, dtype=np.int64)


def detect_light_sources(frame: RasterFrame, params: Stage1Params | None = None,
                         sigma: float | None = None, tiles: int = 1,
                         workers: int | None = None) -> list[LightCandidate]:
    """Extract every point light source from ``frame``'s radiance channel.

    Args:
        frame: frame holding a ``radiance`` channel; NaN pixels are missing data.
        params: kernel and threshold settings.
        sigma: noise level used for SNR; estimated from the frame when omitted.
        tiles: number of row tiles evaluated independently (result is identical).
        workers: thread count for tiled evaluation.

    Returns:
        Candidates sorted by (row, col).
    """
    params = params or Stage1Params()
    rad = frame.radiance
    h, w = rad.shape
    min_side = 2 * params.ring_outer + 1
    if h < min_side or w < min_side:
        raise ValueError(f"frame {h}x{w} is smaller than the {min_side}px kernel")
    if sigma is None:
        sigma = estimate_noise_sigma(frame, params.sigma_estimator)

    bounds = np.linspace(0, h, max(1, int(tiles)) + 1).astype(int)
    spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(spans) == 1:
        parts = [_raw_candidates(rad, params, 0, h)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: _raw_candidates(rad, params, *s), spans))
    rr = np.concatenate([p[0] for p in parts]).astype(np.int64)
    cc = np.concatenate([p[1] for p in parts]).astype(np.int64)
    peak = np.concatenate([p[2] for p in parts])
    bg = np.concatenate([p[3] for p in parts])

    keep = _nms(rr, cc, peak, params.nms_window, (h, w))
    keep = keep[np.lexsort((cc[keep], rr[keep]))]
    lat, lon = pixel_to_latlon(frame, rr[keep], cc[keep])
    out = []
    for k, la, lo in zip(keep, lat, lon):
        prom = float(peak[k] - bg[k])
        out.append(LightCandidate(
            row=int(rr[k]), col=int(cc[k]), geo=GeoPoint(float(la), float(lo)),
            peak_radiance=float(peak[k]), prominence=prom,
            local_background=float(bg[k]), snr=max(prom, 0.0) / sigma,
        ))
    return out
