"""Per-frame orchestration: detect, suppress, classify, geofence, correlate, crop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .correlate import AisStore, correlate
from .geofence import InfrastructureIndex, load_infrastructure, suppress_near_infrastructure
from .raster_io import RasterFrame, extract_crop, format_time
from .stage1_detect import detect_light_sources
from .stage2_suppress import run_stage2
from .stage3_classify import ClassifierModel, filter_detections, load_model, reference_model

STAGES = ("stage1", "stage2", "stage3", "geofence", "correlate", "crops")
KEPT, SUPPRESSED, REJECTED, GEOFENCED = "kept", "suppressed", "rejected", "geofenced"


class StageError(RuntimeError):
    """A pipeline stage failed; the frame is aborted."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    def to_json(self) -> dict:
        return {"stage": self.stage, "error": type(self.cause).__name__,
                "message": str(self.cause)}


@dataclass
class DetectionRecord:
    detection_id: str
    frame_id: str
    acquired_at: str
    lat: float
    lon: float
    row: int
    col: int
    peak_radiance: float
    prominence: float
    snr: float
    status: str
    confidence: float | None = None
    flags: list = field(default_factory=list)
    correlated_mmsi: str | None = None
    correlation_distance_m: float | None = None
    crop_path: str | None = None
    stale: bool = False
    timings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DetectionRecord":
        return cls(**d)


class Pipeline:
    """Loads the shared read-only resources once and processes frames."""

    def __init__(self, config: PipelineConfig | None = None, model: ClassifierModel | None = None,
                 infrastructure: InfrastructureIndex | None = None):
        self.config = config or PipelineConfig()
        if model is None:
            if self.config.model_path:
                model = load_model(self.config.model_path)
            else:
                model = reference_model(self.config.reference_noise_sigma)
        self.model = model
        if infrastructure is None:
            infrastructure = (load_infrastructure(self.config.infrastructure_path)
                              if self.config.infrastructure_path else InfrastructureIndex())
        self.infrastructure = infrastructure

    def process(self, frame: RasterFrame, ais_store: AisStore | None = None,
                out_dir=None, now: datetime | None = None) -> list[DetectionRecord]:
        return self.process_timed(frame, ais_store, out_dir, now)[0]

    def process_timed(self, frame: RasterFrame, ais_store: AisStore | None = None,
                      out_dir=None, now: datetime | None = None):
        """Like :meth:`process` but also returns the per-stage wall-clock seconds."""
        cfg = self.config
        tracks = ais_store.snapshot() if ais_store is not None else {}
        timings = {}
        clock = time.perf_counter()

        def run(stage, fn, *args, **kw):
            nonlocal clock
            try:
                out = fn(*args, **kw)
            except Exception as exc:
                raise StageError(stage, exc) from exc
            t = time.perf_counter()
            timings[stage] = t - clock
            clock = t
            return out

        cands = run("stage1", detect_light_sources, frame, cfg.stage1, tiles=cfg.stage1_tiles)
        ids = {(c.row, c.col): f"{frame.frame_id}-{k:05d}" for k, c in enumerate(cands)}
        kept, suppressed = run("stage2", run_stage2, cands, frame, cfg.stage2)
        accepted, rejected = run("stage3", filter_detections, kept, frame, self.model,
                                 cfg.threshold)
        survivors, fenced = run("geofence", suppress_near_infrastructure, accepted,
                                self.infrastructure)
        corr = run("correlate", correlate, survivors, tracks, frame.acquired_at, cfg.gate,
                   detection_ids=[ids[(c.row, c.col)] for c in survivors])
        matched = corr.by_detection()

        now = now or datetime.now(timezone.utc)
        stale = (now - frame.acquired_at).total_seconds() > cfg.max_frame_age_s
        acquired = format_time(frame.acquired_at)

        def record(c, status, flags):
            det_id = ids[(c.row, c.col)]
            mmsi, dist = matched.get(det_id, (None, None))
            return DetectionRecord(
                detection_id=det_id, frame_id=frame.frame_id, acquired_at=acquired,
                lat=c.geo.lat, lon=c.geo.lon, row=c.row, col=c.col,
                peak_radiance=c.peak_radiance, prominence=c.prominence, snr=c.snr,
                status=status, confidence=c.confidence, flags=flags,
                correlated_mmsi=mmsi, correlation_distance_m=dist, stale=stale)

        records = [record(c, KEPT, []) for c in survivors]
        records += [record(c, GEOFENCED, [{"rule": "INFRASTRUCTURE", "detail": e.kind}])
                    for c, e in fenced]
        records += [record(c, REJECTED, []) for c in rejected]
        records += [record(c, SUPPRESSED, [f.to_dict() for f in c.flags]) for c in suppressed]
        records.sort(key=lambda r: r.detection_id)

        if out_dir is not None and cfg.write_crops:
            run("crops", self._write_crops, frame, records, Path(out_dir))
        else:
            timings["crops"] = 0.0
        timings["total"] = sum(timings.values())
        for r in records:
            r.timings = dict(timings)
        return records, timings

    def _write_crops(self, frame, records, out_dir: Path):
        crop_dir = out_dir / "crops" / frame.frame_id
        crop_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            crop = extract_crop(frame, (r.row, r.col), self.config.crop_size)
            path = crop_dir / f"{r.detection_id}.npy"
            np.save(path, crop.planes)
            r.crop_path = str(path)


def process_frame(frame: RasterFrame, ais_store: AisStore | None = None,
                  config: PipelineConfig | None = None, out_dir=None,
                  **resources) -> list[DetectionRecord]:
    """One-shot convenience wrapper around :class:`Pipeline`."""
    return Pipeline(config, **resources).process(frame, ais_store, out_dir=out_dir)


def kept(records):
    return [r for r in records if r.status == KEPT]
