"""Long-running detection service: inbox watcher, HTTP ingest, persistence, queries.

Durable state lives under ``output_dir``::

    incoming/<frame_id>.json|.planes   accepted frames, written before queueing
    detections.jsonl                   kept detections, append-only
    audit.jsonl                        every record plus frame events, append-only
    frames/<frame_id>.done             completion marker, written last
    crops/<frame_id>/<id>.npy          crop per record

A frame is complete once its marker exists.  On start every incoming
frame without a marker is queued again; log lines from an interrupted run
are deduplicated by ``detection_id`` when the logs are read back.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import sys
import threading
import time
from collections import Counter
from contextlib import asynccontextmanager
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, File, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse

from .config import ConfigError, PipelineConfig, load_config
from .correlate import AisPosition, AisStore, read_ais
from .pipeline import KEPT, STAGES, Pipeline, StageError
from .raster_io import FrameFormatError, format_time, frame_from_bytes, parse_time

log = logging.getLogger(__name__)

CONFIG_ENV = "NIGHTWATCH_CONFIG"
QUEUED, PROCESSING, DONE, FAILED = "queued", "processing", "done", "failed"


class QueueFullError(RuntimeError):
    pass


def _safe_id(frame_id: str) -> str:
    if not frame_id or "/" in frame_id or "\\" in frame_id or frame_id.startswith("."):
        raise FrameFormatError(f"frame_id {frame_id!r} is not usable as a file name")
    return frame_id


def _read_jsonl(path: Path):
    """Parsed lines; a torn final line from a crash is skipped."""
    if not path.exists():
        return []
    out = []
    with open(path) as fh:
        for line in fh:
            try:
                out.append(json.loads(line))
            except ValueError:
                log.warning("skipping unreadable line in %s", path)
    return out


def _append_jsonl(path: Path, rows) -> None:
    if not rows:
        return
    text = "".join(json.dumps(r) + "\n" for r in rows)
    with open(path, "a") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class Metrics:
    """Monotone counters and latency sums, rendered as plain text."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counters = Counter()
        self.stage_seconds = Counter()
        self.frame_seconds = 0.0

    def inc(self, name: str, n: int = 1):
        with self._lock:
            self.counters[name] += n

    def observe_frame(self, timings: dict, latency_s: float):
        with self._lock:
            for stage, t in timings.items():
                if stage != "total":
                    self.stage_seconds[stage] += t
            self.frame_seconds += latency_s

    def snapshot(self) -> dict:
        with self._lock:
            return {"counters": dict(self.counters), "stage_seconds": dict(self.stage_seconds),
                    "frame_seconds": self.frame_seconds}

    def render(self, queue_depth: int = 0) -> str:
        snap = self.snapshot()
        names = ("frames_received", "frames_duplicate", "frames_processed", "frames_failed",
                 "frames_recovered", "frames_stale", "detections_emitted", "records_emitted",
                 "records_suppressed", "records_rejected", "records_geofenced", "ais_positions")
        lines = [f"nightwatch_{n} {snap['counters'].get(n, 0)}" for n in names]
        for stage in STAGES:
            lines.append(f'nightwatch_stage_seconds_total{{stage="{stage}"}} '
                         f"{snap['stage_seconds'].get(stage, 0.0):.6f}")
        lines.append(f"nightwatch_frame_seconds_total {snap['frame_seconds']:.6f}")
        lines.append(f"nightwatch_queue_depth {queue_depth}")
        return "\n".join(lines) + "\n"


class Service:
    """Bounded-queue frame processor with durable, exactly-once results per frame_id."""

    def __init__(self, config: PipelineConfig, pipeline: Pipeline | None = None):
        self.config = config
        self.pipeline = pipeline or Pipeline(config)
        self.root = Path(config.output_dir)
        self.incoming = self.root / "incoming"
        self.markers = self.root / "frames"
        self.detections_path = self.root / "detections.jsonl"
        self.audit_path = self.root / "audit.jsonl"
        for d in (self.root, self.incoming, self.markers):
            d.mkdir(parents=True, exist_ok=True)

        self.ais = AisStore(read_ais(config.ais_path) if config.ais_path else ())
        self.metrics = Metrics()
        # unbounded so recovery never blocks; submit_bytes enforces queue_size
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._status: dict[str, str] = {}
        self._records: dict[str, list[dict]] = {}
        self._errors: dict[str, dict] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._recover()

    # -- state -----------------------------------------------------------------

    def _recover(self):
        done = {p.stem for p in self.markers.glob("*.done")}
        by_frame: dict[str, dict[str, dict]] = {}
        for rec in _read_jsonl(self.detections_path):
            if rec.get("frame_id") in done:
                by_frame.setdefault(rec["frame_id"], {})[rec["detection_id"]] = rec
        for fid in done:
            recs = sorted(by_frame.get(fid, {}).values(), key=lambda r: r["detection_id"])
            self._records[fid] = recs
            self._status[fid] = DONE
            self.metrics.inc("frames_processed")
            self.metrics.inc("detections_emitted", len(recs))
        for header in sorted(self.incoming.glob("*.json")):
            fid = header.stem
            if fid in done or not header.with_suffix(".planes").exists():
                continue
            self._status[fid] = QUEUED
            self._queue.put(fid)
            self.metrics.inc("frames_recovered")
            log.info("re-queued incomplete frame %s", fid)

    def status(self, frame_id: str) -> str | None:
        with self._lock:
            return self._status.get(frame_id)

    def records(self, frame_id: str) -> list[dict]:
        with self._lock:
            return list(self._records.get(frame_id, ()))

    def error(self, frame_id: str) -> dict | None:
        with self._lock:
            return self._errors.get(frame_id)

    def queue_depth(self) -> int:
        return self._queue.qsize()

    # -- ingest ----------------------------------------------------------------

    def submit_bytes(self, header_bytes: bytes, plane_bytes: bytes) -> tuple[str, str, bool]:
        """Validate, persist and queue a frame.

        Returns ``(frame_id, status, accepted)``; ``accepted`` is False when
        the frame_id was already known and nothing was queued.
        """
        frame = frame_from_bytes(header_bytes, plane_bytes)
        fid = _safe_id(frame.frame_id)
        with self._lock:
            known = self._status.get(fid)
            if known is not None and known != FAILED:
                self.metrics.inc("frames_duplicate")
                return fid, known, False
            if self._queue.qsize() >= self.config.queue_size:
                raise QueueFullError("work queue is full")
            _write_atomic(self.incoming / f"{fid}.planes", plane_bytes)
            _write_atomic(self.incoming / f"{fid}.json", header_bytes)
            self._status[fid] = QUEUED
            self._errors.pop(fid, None)
            self._queue.put_nowait(fid)
        self.metrics.inc("frames_received")
        return fid, QUEUED, True

    def submit_path(self, path) -> tuple[str, str, bool]:
        stem = Path(path)
        if stem.suffix in (".json", ".planes"):
            stem = stem.with_suffix("")
        header = stem.with_name(stem.name + ".json").read_bytes()
        planes = stem.with_name(stem.name + ".planes").read_bytes()
        return self.submit_bytes(header, planes)

    def add_ais(self, positions) -> int:
        n = self.ais.add(positions)
        self.metrics.inc("ais_positions", n)
        return n

    # -- processing ------------------------------------------------------------

    def process_one(self, frame_id: str) -> str:
        with self._lock:
            self._status[frame_id] = PROCESSING
        started = time.perf_counter()
        self._audit([{"event": "frame_started", "frame_id": frame_id,
                      "at": format_time(datetime.now(timezone.utc))}])
        try:
            stem = self.incoming / frame_id
            frame = frame_from_bytes(stem.with_suffix(".json").read_bytes(),
                                     stem.with_suffix(".planes").read_bytes())
            records, timings = self.pipeline.process_timed(frame, self.ais, out_dir=self.root)
        except Exception as exc:  # one bad frame never stops the service
            failure = (exc.to_json() if isinstance(exc, StageError)
                       else {"stage": "ingest", "error": type(exc).__name__, "message": str(exc)})
            failure.update(event="frame_failed", frame_id=frame_id)
            log.warning("frame %s failed: %s", frame_id, failure)
            self._audit([failure])
            with self._lock:
                self._status[frame_id] = FAILED
                self._errors[frame_id] = failure
            self.metrics.inc("frames_failed")
            return FAILED

        rows = [r.to_json() for r in records]
        kept_rows = [r for r in rows if r["status"] == KEPT]
        self._audit([dict(r, event="record") for r in rows])
        with self._log_lock:
            _append_jsonl(self.detections_path, kept_rows)
        _write_atomic(self.markers / f"{frame_id}.done", b"")
        by_status = Counter(r["status"] for r in rows)
        with self._lock:
            self._records[frame_id] = kept_rows
            self._status[frame_id] = DONE
            self.metrics.inc("frames_processed")
            self.metrics.inc("detections_emitted", len(kept_rows))
            self.metrics.inc("records_emitted", len(rows))
            for s in ("suppressed", "rejected", "geofenced"):
                self.metrics.inc(f"records_{s}", by_status.get(s, 0))
            if records and records[0].stale:
                self.metrics.inc("frames_stale")
        self.metrics.observe_frame(timings, time.perf_counter() - started)
        self._audit([{"event": "frame_done", "frame_id": frame_id, "kept": len(kept_rows),
                      "records": len(rows)}])
        return DONE

    def _audit(self, rows):
        with self._log_lock:
            _append_jsonl(self.audit_path, rows)

    def _worker(self):
        while not self._stop.is_set():
            try:
                fid = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                self.process_one(fid)
            finally:
                self._queue.task_done()

    def _watch_inbox(self):
        inbox = Path(self.config.inbox_dir)
        rejected = inbox / "rejected"
        while not self._stop.is_set():
            for header in sorted(inbox.glob("*.json")):
                planes = header.with_suffix(".planes")
                if not planes.exists():
                    continue
                try:
                    self.submit_bytes(header.read_bytes(), planes.read_bytes())
                except QueueFullError:
                    break  # retry on the next poll
                except (FrameFormatError, ValueError, OSError) as exc:
                    log.warning("rejecting inbox frame %s: %s", header.name, exc)
                    rejected.mkdir(exist_ok=True)
                    for p in (header, planes):
                        os.replace(p, rejected / p.name)
                    continue
                header.unlink()
                planes.unlink()
            self._stop.wait(self.config.poll_interval_s)

    def start(self) -> "Service":
        for k in range(self.config.workers):
            t = threading.Thread(target=self._worker, name=f"nightwatch-worker-{k}", daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.inbox_dir:
            Path(self.config.inbox_dir).mkdir(parents=True, exist_ok=True)
            t = threading.Thread(target=self._watch_inbox, name="nightwatch-inbox", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self, timeout: float = 10.0):
        self._stop.set()
        for t in self._threads:
            t.join(timeout)
        self._threads.clear()

    def drain(self, timeout: float = 60.0) -> bool:
        """Wait until nothing is queued or processing (for tests and batch use)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                busy = any(s in (QUEUED, PROCESSING) for s in self._status.values())
            if not busy:
                return True
            time.sleep(0.02)
        return False

    # -- queries ---------------------------------------------------------------

    def query(self, bbox=None, since=None) -> list[dict]:
        """Kept detections inside ``bbox`` (min_lon, min_lat, max_lon, max_lat)
        acquired at or after ``since``."""
        since_dt = parse_time(since) if since else None
        with self._lock:
            rows = [r for recs in self._records.values() for r in recs]
        out = []
        for r in rows:
            if bbox is not None and not _in_bbox(r["lat"], r["lon"], bbox):
                continue
            if since_dt is not None and parse_time(r["acquired_at"]) < since_dt:
                continue
            out.append(r)
        out.sort(key=lambda r: r["detection_id"])
        return out

    def audit_trail(self, detection_id: str) -> list[dict]:
        return [r for r in _read_jsonl(self.audit_path) if r.get("detection_id") == detection_id]


def _in_bbox(lat, lon, bbox) -> bool:
    min_lon, min_lat, max_lon, max_lat = bbox
    if not min_lat <= lat <= max_lat:
        return False
    if min_lon <= max_lon:
        return min_lon <= lon <= max_lon
    return lon >= min_lon or lon <= max_lon  # box crossing the antimeridian


def parse_bbox(text: str):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError("bbox must be min_lon,min_lat,max_lon,max_lat") from None
    if len(parts) != 4 or parts[1] > parts[3]:
        raise ValueError("bbox must be min_lon,min_lat,max_lon,max_lat")
    return tuple(parts)


def create_app(service: Service, manage: bool = True):
    """FastAPI application over ``service``; ``manage`` starts/stops its threads."""

    @asynccontextmanager
    async def lifespan(app):
        if manage:
            service.start()
        yield
        if manage:
            service.stop()

    app = FastAPI(title="nightwatch", lifespan=lifespan)
    app.state.service = service

    @app.post("/v1/frames")
    async def upload_frame(header: UploadFile = File(...), planes: UploadFile = File(...)):
        h, p = await header.read(), await planes.read()
        try:
            fid, status, accepted = service.submit_bytes(h, p)
        except QueueFullError as exc:
            raise HTTPException(503, str(exc)) from None
        except (FrameFormatError, ValueError) as exc:
            raise HTTPException(400, f"invalid frame container: {exc}") from None
        if accepted:
            return JSONResponse({"frame_id": fid, "status": status}, status_code=202)
        body = {"frame_id": fid, "status": status, "duplicate": True}
        if status == DONE:
            body["detections"] = service.records(fid)
        return JSONResponse(body, status_code=200)

    @app.get("/v1/detections")
    def detections(frame_id: str | None = None, bbox: str | None = None,
                   since: str | None = None):
        if frame_id is not None:
            status = service.status(frame_id)
            if status is None:
                raise HTTPException(404, f"unknown frame_id {frame_id!r}")
            body = {"frame_id": frame_id,
                    "status": PROCESSING if status == QUEUED else status}
            if status == DONE:
                body["detections"] = service.records(frame_id)
            elif status == FAILED:
                body["error"] = service.error(frame_id)
            return body
        try:
            box = parse_bbox(bbox) if bbox else None
            rows = service.query(box, since)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from None
        return {"detections": rows}

    @app.post("/v1/ais")
    async def ais(request: Request):
        body = await request.body()
        try:
            text = body.decode()
            stripped = text.strip()
            if stripped.startswith("["):
                items = json.loads(stripped)
            else:
                items = [json.loads(line) for line in text.splitlines() if line.strip()]
            positions = [AisPosition.from_json(d) for d in items]
        except (ValueError, KeyError, TypeError) as exc:
            raise HTTPException(400, f"invalid AIS payload: {exc}") from None
        return {"accepted": service.add_ais(positions), "positions": len(service.ais)}

    @app.get("/metrics", response_class=PlainTextResponse)
    def metrics():
        return service.metrics.render(service.queue_depth())

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "queue_depth": service.queue_depth()}

    return app


def serve(config: PipelineConfig) -> None:
    import uvicorn

    service = Service(config)
    uvicorn.run(create_app(service), host=config.host, port=config.port, log_level="info")


def main(argv=None) -> int:
    """Entry point reading the config path from ``NIGHTWATCH_CONFIG``."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    path = (argv[0] if argv else None) or os.environ.get(CONFIG_ENV)
    if not path:
        print(f"set {CONFIG_ENV} to a config JSON file", file=sys.stderr)
        return 2
    try:
        config = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    serve(config)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
