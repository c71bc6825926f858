#!/usr/bin/env python3
"""Drive the HTTP service end to end without opening a port.

Uploads a synthetic frame, feeds AIS, polls until the frame is done,
shows that a re-upload is answered from the stored result, and prints the
metrics page.  State is written to a temporary directory.

Usage:
    python demos/service_walkthrough.py
"""
import json
import tempfile
import time
import warnings
from pathlib import Path

warnings.filterwarnings("ignore", message="Using `httpx`")
from fastapi.testclient import TestClient  # noqa: E402

from nightwatch.config import PipelineConfig
from nightwatch.geofence import write_infrastructure
from nightwatch.raster_io import frame_to_bytes
from nightwatch.service import Service, create_app
from nightwatch.stage2_suppress import FlareGazetteer
from nightwatch.synth import generate_ais, generate_frame, mixed_scene


def main():
    frame, truth = generate_frame(mixed_scene(0))
    header, planes = frame_to_bytes(frame)
    ais = generate_ais(truth, 200.0, 0.3, seed=0, frame_time=frame.acquired_at)

    with tempfile.TemporaryDirectory() as out:
        # flare sites and platforms come from catalogues shipped with the scene
        infra = write_infrastructure(truth.infrastructure_entries(), Path(out) / "infra.jsonl")
        cfg = PipelineConfig(output_dir=out, workers=1, infrastructure_path=str(infra))
        cfg.stage2.gazetteer = FlareGazetteer.from_list(truth.gazetteer_entries())
        service = Service(cfg)
        with TestClient(create_app(service)) as client:
            lines = "\n".join(json.dumps(a.to_json()) for a in ais)
            print("POST /v1/ais ->", client.post("/v1/ais", content=lines).json())

            files = {"header": ("f.json", header), "planes": ("f.planes", planes)}
            r = client.post("/v1/frames", files=files)
            print("POST /v1/frames ->", r.status_code, r.json())

            while True:
                body = client.get("/v1/detections", params={"frame_id": frame.frame_id}).json()
                if body["status"] != "processing":
                    break
                print("  ... status", body["status"])
                time.sleep(0.2)
            dets = body["detections"]
            print(f"GET /v1/detections -> {body['status']}, {len(dets)} kept detections")
            for d in dets[:5]:
                print(f"  {d['detection_id']} ({d['lat']:.4f}, {d['lon']:.4f}) "
                      f"conf {d['confidence']:.3f} mmsi {d['correlated_mmsi']}")

            r = client.post("/v1/frames", files=files)
            print("re-upload ->", r.status_code, {k: v for k, v in r.json().items()
                                                 if k != "detections"})
            print("\nGET /metrics")
            print(client.get("/metrics").text)


if __name__ == "__main__":
    main()
