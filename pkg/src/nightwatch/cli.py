"""Command-line entry points: detect, correlate, eval, synth, serve, inspect.

Every command prints JSON.  Bad flags and missing input files exit with
status 2; relative paths resolve against the working directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .correlate import AisStore, GateParams, correlate, read_ais, write_ais
from .evaluation import DEFAULT_MATCH_RADIUS_M, read_points, score
from .geo import GeoPoint
from .geofence import write_infrastructure
from .pipeline import KEPT, Pipeline
from .raster_io import FrameFormatError, load_frame, parse_time, write_frame
from .stage2_suppress import FlareGazetteer
from .stage3_classify import ModelFormatError
from .synth import SceneSpec, generate_ais, generate_frame, mixed_scene


class CliError(Exception):
    """Reported on stderr with exit status 2."""


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {str(p)!r} not found")
    return p


def _need_frame(path) -> Path:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".planes") else p
    for suffix in (".json", ".planes"):
        _need(stem.with_name(stem.name + suffix), "frame file")
    return stem


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")


def _write_jsonl(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def _read_jsonl(path: Path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _config(args) -> PipelineConfig:
    cfg = load_config(_need(args.config, "config file")) if args.config else PipelineConfig()
    if getattr(args, "model", None):
        m = Path(args.model)
        _need(m if m.suffix == ".json" else m.with_name(m.name + ".json"), "model file")
        cfg.model_path = str(m)
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    if getattr(args, "infrastructure", None):
        cfg.infrastructure_path = str(_need(args.infrastructure, "infrastructure file"))
    if getattr(args, "gazetteer", None):
        cfg.stage2.gazetteer = FlareGazetteer.load(_need(args.gazetteer, "gazetteer file"))
    if getattr(args, "ais", None):
        cfg.ais_path = str(_need(args.ais, "AIS file"))
    if getattr(args, "workers", None):
        cfg.stage1_tiles = cfg.workers = args.workers
    return cfg.validate()


def cmd_detect(args) -> int:
    stem = _need_frame(args.frame)
    cfg = _config(args)
    out = Path(args.out)
    frame = load_frame(stem)
    ais = AisStore(read_ais(cfg.ais_path)) if cfg.ais_path else None
    records = Pipeline(cfg).process(frame, ais, out_dir=out)
    rows = [r.to_json() for r in records]
    _write_jsonl(out / "detections.jsonl", [r for r in rows if r["status"] == KEPT])
    _write_jsonl(out / "audit.jsonl", [dict(r, event="record") for r in rows])
    counts = {}
    for r in rows:
        counts[r["status"]] = counts.get(r["status"], 0) + 1
    _emit({"frame_id": frame.frame_id, "records": len(rows), "by_status": counts,
           "detections": str(out / "detections.jsonl"), "audit": str(out / "audit.jsonl")})
    return 0


def cmd_correlate(args) -> int:
    rows = _read_jsonl(_need(args.detections, "detections file"))
    tracks = read_ais(_need(args.ais, "AIS file"))
    gate = GateParams(args.gate_base_m, args.gate_speed_mps, args.max_extrapolation_s)
    frames = {}
    for r in rows:
        if r.get("status", KEPT) == KEPT:
            frames.setdefault((r["frame_id"], r["acquired_at"]), []).append(r)
    matched = dark = 0
    for (_, acquired), group in sorted(frames.items()):
        res = correlate([GeoPoint(r["lat"], r["lon"]) for r in group], tracks,
                        parse_time(acquired), gate,
                        detection_ids=[r["detection_id"] for r in group])
        hits = res.by_detection()
        for r in group:
            mmsi, dist = hits.get(r["detection_id"], (None, None))
            r["correlated_mmsi"], r["correlation_distance_m"] = mmsi, dist
        matched += len(res.matches)
        dark += len(res.dark_detections)
    if args.out:
        _write_jsonl(Path(args.out), rows)
        _emit({"records": len(rows), "correlated": matched, "dark": dark, "out": args.out})
    else:
        for r in rows:
            print(json.dumps(r))
    return 0


def cmd_eval(args) -> int:
    if args.radius_m <= 0:
        raise CliError("--radius-m must be positive")
    pred = read_points(_need(args.pred, "prediction file"), kind=None, status=KEPT)
    truth = read_points(_need(args.truth, "truth file"), kind="vessel", status=None)
    _emit(score(pred, truth, args.radius_m).to_dict())
    return 0


def cmd_synth(args) -> int:
    if args.spec:
        spec = SceneSpec.from_dict(json.loads(_need(args.spec, "scene spec").read_text()))
    else:
        spec = mixed_scene(args.seed)
    frame, truth = generate_frame(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_path = write_frame(frame, out / frame.frame_id)
    truth_path = truth.write_jsonl(out / "truth.jsonl")
    ais = generate_ais(truth, args.ais_jitter_m, args.dark_fraction, seed=spec.seed,
                       frame_time=frame.acquired_at)
    ais_path = write_ais(ais, out / "ais.jsonl")
    gaz_path = out / "gazetteer.json"
    gaz_path.write_text(json.dumps(truth.gazetteer_entries()) + "\n")
    infra_path = write_infrastructure(truth.infrastructure_entries(), out / "infrastructure.jsonl")
    config = {"gazetteer_path": gaz_path.name, "infrastructure_path": infra_path.name,
              "ais_path": ais_path.name, "output_dir": "service-out"}
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n")
    _emit({"frame_id": frame.frame_id, "frame": str(frame_path.with_suffix("")),
           "truth": str(truth_path), "ais": str(ais_path), "gazetteer": str(gaz_path),
           "infrastructure": str(infra_path), "config": str(config_path),
           "vessels": len(truth.vessels()), "artifacts": len(truth.artifacts())})
    return 0


def cmd_serve(args) -> int:
    import os

    from .service import CONFIG_ENV, serve

    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise CliError(f"--config or {CONFIG_ENV} is required")
    cfg = load_config(_need(path, "config file"))
    if args.port is not None:
        cfg.port = args.port
    serve(cfg)
    return 0


def cmd_inspect(args) -> int:
    root = Path(args.out) if args.out else Path(
        load_config(_need(args.config, "config file")).output_dir if args.config
        else PipelineConfig().output_dir)
    audit = _need(root / "audit.jsonl", "audit log")
    trail = [r for r in _read_jsonl(audit) if r.get("detection_id") == args.detection]
    if not trail:
        print(f"detection {args.detection!r} not found in {audit}", file=sys.stderr)
        return 1
    _emit({"detection_id": args.detection, "crop_path": trail[-1].get("crop_path"),
           "trail": trail})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nightwatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="run the pipeline on one frame")
    d.add_argument("--frame", required=True, help="frame stem or its .json/.planes file")
    d.add_argument("--config")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--model", help="classifier model file (overrides config)")
    d.add_argument("--threshold", type=float, help="classifier acceptance threshold")
    d.add_argument("--ais", help="AIS JSON-lines file for correlation")
    d.add_argument("--infrastructure", help="infrastructure JSON-lines file")
    d.add_argument("--gazetteer", help="gas-flare gazetteer JSON file")
    d.add_argument("--workers", type=int, help="row tiles evaluated in parallel")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("correlate", help="match detections to AIS tracks")
    c.add_argument("--detections", required=True)
    c.add_argument("--ais", required=True)
    c.add_argument("--out")
    c.add_argument("--gate-base-m", type=float, default=GateParams.base_uncertainty_m)
    c.add_argument("--gate-speed-mps", type=float, default=GateParams.max_speed_mps)
    c.add_argument("--max-extrapolation-s", type=float, default=GateParams.max_extrapolation_s)
    c.set_defaults(func=cmd_correlate)

    e = sub.add_parser("eval", help="precision / recall / F1 against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--radius-m", type=float, default=DEFAULT_MATCH_RADIUS_M)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic frame with ground truth")
    s.add_argument("--spec", help="scene spec JSON (default: mixed scene for --seed)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--ais-jitter-m", type=float, default=200.0)
    s.add_argument("--dark-fraction", type=float, default=0.3)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--config")
    v.add_argument("--port", type=int)
    v.set_defaults(func=cmd_serve)

    i = sub.add_parser("inspect", help="print the audit trail of one detection")
    i.add_argument("--detection", required=True)
    i.add_argument("--out", help="detect/service output directory")
    i.add_argument("--config")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"nightwatch {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FrameFormatError, ModelFormatError, ValueError) as exc:
        print(f"nightwatch {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
