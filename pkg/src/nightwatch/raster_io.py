"""Frame container I/O, pixel/geo mapping and crop extraction.

A frame on disk is a pair of files sharing a stem:

``<stem>.json``
    header with metadata, channel order and geolocation.
``<stem>.planes``
    raw little-endian float32 planes, channel-major, in header order.
    Grid-geolocated frames append ``latitude`` then ``longitude`` planes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_M, GeoPoint, haversine_array

HEADER_VERSION = 1
CHANNELS = ("radiance", "land_mask", "moonlight", "cloud_mask")
DEFAULT_CROP_SIZE = 9
_DTYPE = np.dtype("<f4")


class FrameFormatError(ValueError):
    pass


def parse_time(value) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        ts = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True, eq=False)
class RasterFrame:
    """Multi-channel georeferenced frame.

    ``planes`` has shape (channels, height, width).  Geolocation is either a
    6-coefficient affine ``geotransform`` in GDAL order
    ``(lon0, dlon/dcol, dlon/drow, lat0, dlat/dcol, dlat/drow)`` evaluated at
    integer pixel indices, or per-pixel ``lat_grid``/``lon_grid`` arrays.
    """

    frame_id: str
    satellite_id: str
    acquired_at: datetime
    channels: tuple
    planes: np.ndarray
    geotransform: tuple | None = None
    lat_grid: np.ndarray | None = None
    lon_grid: np.ndarray | None = None
    pixel_size_m: float = 750.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float32)
        if planes.ndim != 3:
            raise FrameFormatError("planes must be (channels, height, width)")
        channels = tuple(self.channels)
        if planes.shape[0] != len(channels):
            raise FrameFormatError(
                f"{len(channels)} channels declared but {planes.shape[0]} planes given")
        if len(set(channels)) != len(channels):
            raise FrameFormatError("duplicate channel names")
        if "radiance" not in channels:
            raise FrameFormatError("frame has no 'radiance' channel")
        if not self.pixel_size_m > 0:
            raise FrameFormatError("pixel_size_m must be positive")
        if (self.geotransform is None) == (self.lat_grid is None):
            raise FrameFormatError("exactly one of geotransform or lat/lon grids is required")
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "acquired_at", parse_time(self.acquired_at))
        if self.geotransform is not None:
            gt = tuple(float(v) for v in self.geotransform)
            if len(gt) != 6:
                raise FrameFormatError("geotransform needs 6 coefficients")
            if gt[1] * gt[5] - gt[2] * gt[4] == 0:
                raise FrameFormatError("geotransform is singular")
            object.__setattr__(self, "geotransform", gt)
        else:
            lat = np.asarray(self.lat_grid, dtype=np.float32)
            lon = np.asarray(self.lon_grid, dtype=np.float32)
            if lat.shape != planes.shape[1:] or lon.shape != planes.shape[1:]:
                raise FrameFormatError("lat/lon grids must match the plane shape")
            object.__setattr__(self, "lat_grid", lat)
            object.__setattr__(self, "lon_grid", lon)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def has_channel(self, name: str) -> bool:
        return name in self.channels

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.planes[self.channels.index(name)]
        except ValueError:
            raise KeyError(f"frame {self.frame_id!r} has no {name!r} channel") from None

    @property
    def radiance(self) -> np.ndarray:
        return self.channel("radiance")

    def header(self) -> dict:
        hdr = {
            "version": HEADER_VERSION,
            "frame_id": self.frame_id,
            "satellite_id": self.satellite_id,
            "acquired_at": format_time(self.acquired_at),
            "width": self.width,
            "height": self.height,
            "channels": list(self.channels),
            "pixel_size_m": self.pixel_size_m,
        }
        if self.geotransform is not None:
            hdr["geotransform"] = list(self.geotransform)
        else:
            hdr["geo_planes"] = ["latitude", "longitude"]
        if self.extra:
            hdr["extra"] = self.extra
        return hdr

    def same_as(self, other: "RasterFrame") -> bool:
        """Bitwise equality of metadata and planes."""
        if self.header() != other.header():
            return False
        if self.planes.tobytes() != other.planes.tobytes():
            return False
        if self.lat_grid is not None:
            return (self.lat_grid.tobytes() == other.lat_grid.tobytes()
                    and self.lon_grid.tobytes() == other.lon_grid.tobytes())
        return True


def _paths(path):
    p = Path(path)
    if p.suffix in (".json", ".planes"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".planes")


def frame_to_bytes(frame: RasterFrame) -> tuple[bytes, bytes]:
    """Serialize to (header JSON bytes, plane bytes)."""
    header = json.dumps(frame.header(), indent=1).encode()
    blobs = [frame.planes.astype(_DTYPE, copy=False).tobytes()]
    if frame.lat_grid is not None:
        blobs.append(frame.lat_grid.astype(_DTYPE, copy=False).tobytes())
        blobs.append(frame.lon_grid.astype(_DTYPE, copy=False).tobytes())
    return header, b"".join(blobs)


def write_frame(frame: RasterFrame, path) -> Path:
    """Write ``frame`` as ``<path>.json`` + ``<path>.planes``; returns the header path."""
    hpath, ppath = _paths(path)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    header, planes = frame_to_bytes(frame)
    ppath.write_bytes(planes)
    hpath.write_bytes(header)
    return hpath


def frame_from_bytes(header_bytes: bytes, plane_bytes: bytes) -> RasterFrame:
    try:
        hdr = json.loads(header_bytes)
    except (ValueError, UnicodeDecodeError) as exc:
        raise FrameFormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(hdr, dict):
        raise FrameFormatError("header must be a JSON object")
    if hdr.get("version") != HEADER_VERSION:
        raise FrameFormatError(f"unsupported header version {hdr.get('version')!r}")
    try:
        width, height = int(hdr["width"]), int(hdr["height"])
        channels = list(hdr["channels"])
        frame_id = str(hdr["frame_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FrameFormatError(f"bad header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise FrameFormatError("width and height must be positive")
    if "radiance" not in channels:
        raise FrameFormatError("header lists no 'radiance' channel")
    geo_planes = hdr.get("geo_planes") or []
    n_planes = len(channels) + len(geo_planes)
    expected = n_planes * width * height * _DTYPE.itemsize
    if len(plane_bytes) != expected:
        raise FrameFormatError(
            f"plane data is {len(plane_bytes)} bytes, header implies {expected} "
            f"({n_planes} planes of {height}x{width})")
    data = np.frombuffer(plane_bytes, dtype=_DTYPE).reshape(n_planes, height, width)
    data = data.astype(np.float32)
    planes = data[: len(channels)]
    kw = {}
    if geo_planes:
        if geo_planes != ["latitude", "longitude"]:
            raise FrameFormatError(f"unsupported geo_planes {geo_planes!r}")
        kw["lat_grid"], kw["lon_grid"] = data[len(channels)], data[len(channels) + 1]
    else:
        kw["geotransform"] = hdr.get("geotransform")
        if kw["geotransform"] is None:
            raise FrameFormatError("header has neither geotransform nor geo_planes")
    frame = RasterFrame(
        frame_id=frame_id,
        satellite_id=str(hdr.get("satellite_id", "")),
        acquired_at=parse_time(hdr["acquired_at"]),
        channels=tuple(channels),
        planes=planes,
        pixel_size_m=float(hdr.get("pixel_size_m", 750.0)),
        extra=hdr.get("extra", {}),
        **kw,
    )
    frame.planes.flags.writeable = False
    return frame


def load_frame(path) -> RasterFrame:
    """Load and validate a frame from ``<stem>.json`` + ``<stem>.planes``."""
    hpath, ppath = _paths(path)
    if not hpath.exists():
        raise FileNotFoundError(hpath)
    if not ppath.exists():
        raise FileNotFoundError(ppath)
    return frame_from_bytes(hpath.read_bytes(), ppath.read_bytes())


# -- geolocation -----------------------------------------------------------

def pixel_to_geo(frame: RasterFrame, row, col) -> GeoPoint:
    lat, lon = pixel_to_latlon(frame, row, col)
    return GeoPoint(float(lat), float(lon))


def pixel_to_latlon(frame: RasterFrame, rows, cols):
    """Vectorized pixel -> (lat, lon) arrays; grid frames need integer pixels."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if frame.geotransform is not None:
        g = frame.geotransform
        lon = g[0] + cols * g[1] + rows * g[2]
        lat = g[3] + cols * g[4] + rows * g[5]
        return np.asarray(lat, dtype=np.float64), np.asarray(lon, dtype=np.float64)
    r = rows.astype(np.int64)
    c = cols.astype(np.int64)
    if np.any(r < 0) or np.any(r >= frame.height) or np.any(c < 0) or np.any(c >= frame.width):
        raise IndexError("pixel outside frame")
    return (frame.lat_grid[r, c].astype(np.float64), frame.lon_grid[r, c].astype(np.float64))


def geo_to_pixel(frame: RasterFrame, p: GeoPoint) -> tuple[float, float]:
    """Inverse of :func:`pixel_to_geo`; raises ValueError outside the footprint."""
    if frame.geotransform is not None:
        g = frame.geotransform
        dlon = ((p.lon - g[0] + 180.0) % 360.0) - 180.0
        dlat = p.lat - g[3]
        det = g[1] * g[5] - g[2] * g[4]
        col = (g[5] * dlon - g[2] * dlat) / det
        row = (-g[4] * dlon + g[1] * dlat) / det
        if not (-0.5 <= row <= frame.height - 0.5 and -0.5 <= col <= frame.width - 0.5):
            raise ValueError(f"point ({p.lat}, {p.lon}) outside frame {frame.frame_id!r}")
        return float(row), float(col)
    d = haversine_array(frame.lat_grid, frame.lon_grid, p.lat, p.lon)
    idx = int(np.argmin(d))
    if d.flat[idx] > 1.5 * frame.pixel_size_m:
        raise ValueError(f"point ({p.lat}, {p.lon}) outside frame {frame.frame_id!r}")
    r, c = divmod(idx, frame.width)
    return float(r), float(c)


def affine_for_center(lat0: float, lon0: float, width: int, height: int,
                      pixel_size_m: float = 750.0) -> tuple:
    """North-up affine geotransform of a frame centred on (lat0, lon0)."""
    dlat = math.degrees(pixel_size_m / EARTH_RADIUS_M)
    dlon = dlat / max(math.cos(math.radians(lat0)), 1e-6)
    return (lon0 - dlon * (width - 1) / 2, dlon, 0.0,
            lat0 + dlat * (height - 1) / 2, 0.0, -dlat)


# -- crops -------------------------------------------------------------------

@dataclass(frozen=True)
class Crop:
    center_px: tuple
    size: int
    channels: tuple
    planes: np.ndarray  # (channels, size, size)
    fill_value: float = 0.0

    def channel(self, name):
        return self.planes[self.channels.index(name)]


def extract_crop(frame: RasterFrame, center_px, size: int = DEFAULT_CROP_SIZE,
                 fill: float = 0.0, channels=None) -> Crop:
    """Size x size window centred on ``center_px``; out-of-frame pixels get ``fill``."""
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"crop size must be odd and >= 1, got {size}")
    names = tuple(channels) if channels is not None else frame.channels
    idx = [frame.channels.index(n) for n in names]
    r0, c0 = int(center_px[0]), int(center_px[1])
    half = size // 2
    out = np.full((len(idx), size, size), fill, dtype=np.float32)
    top, left = r0 - half, c0 - half
    rs, re = max(top, 0), min(top + size, frame.height)
    cs, ce = max(left, 0), min(left + size, frame.width)
    if rs < re and cs < ce:
        out[:, rs - top:re - top, cs - left:ce - left] = frame.planes[idx, rs:re, cs:ce]
    return Crop(center_px=(r0, c0), size=size, channels=names, planes=out, fill_value=fill)
