import math

import numpy as np
import pytest

from nightwatch.raster_io import CHANNELS, RasterFrame, affine_for_center
from nightwatch.stage3_classify import build_model, random_model


def make_frame(radiance, land=None, moon=None, cloud=None, lat0=35.0, lon0=-40.0,
               frame_id="test-frame", acquired_at="2024-01-01T00:00:00Z", geotransform=None):
    """Four-channel frame around ``radiance`` with optional mask planes."""
    rad = np.asarray(radiance, dtype=np.float32)
    h, w = rad.shape
    zeros = np.zeros((h, w), dtype=np.float32)
    planes = np.stack([rad,
                       zeros if land is None else np.asarray(land, np.float32),
                       zeros if moon is None else np.asarray(moon, np.float32),
                       zeros if cloud is None else np.asarray(cloud, np.float32)])
    gt = geotransform or affine_for_center(lat0, lon0, w, h)
    return RasterFrame(frame_id=frame_id, satellite_id="test-sat", acquired_at=acquired_at,
                       channels=CHANNELS, planes=planes, geotransform=gt)


def random_costs(rng, n, m, p_forbidden=0.2, integer=False):
    c = rng.integers(0, 20, (n, m)).astype(float) if integer else rng.uniform(0, 100, (n, m))
    c[rng.random((n, m)) < p_forbidden] = np.nan
    return c


def loop_forward(model, crop):
    """Direct nested-loop evaluation of conv3x3/ReLU -> mean -> dense -> logistic."""
    x = [[[float(v) for v in row] for row in ch] for ch in crop]
    size = len(x[0])
    for layer, params in zip(model.layers, model.weights):
        if layer["kind"] == "conv3x3":
            kernel, bias = params
            out = []
            for o in range(kernel.shape[0]):
                plane = []
                for r in range(size):
                    row = []
                    for c in range(size):
                        acc = float(bias[o])
                        for i in range(kernel.shape[1]):
                            for dr in range(3):
                                for dc in range(3):
                                    rr, cc = r + dr - 1, c + dc - 1
                                    if 0 <= rr < size and 0 <= cc < size:
                                        acc += float(kernel[o, i, dr, dc]) * x[i][rr][cc]
                        row.append(max(acc, 0.0))
                    plane.append(row)
                out.append(plane)
            x = out
        elif layer["kind"] == "global_avg_pool":
            x = [math.fsum(math.fsum(row) for row in ch) / (size * size) for ch in x]
        else:
            w, b = params
            z = math.fsum(float(wi) * xi for wi, xi in zip(w, x)) + float(b[0])
            return 1.0 / (1.0 + math.exp(-z))


def zero_model(conv=(3,), size=9):
    m = random_model(0, conv, size)
    return build_model(m.layers, [[np.zeros_like(p) for p in ps] for ps in m.weights], size)


# acceptance criterion number -> (title, passed, detail); printed after the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {title}: {detail}")


@pytest.fixture
def frame_factory():
    return make_frame


def synth_frame_bytes(seed: int, frame_id: str, size: int = 256, vessels: int = 6):
    """Container bytes plus ground truth for a small vessels-only synthetic frame."""
    from nightwatch.raster_io import frame_to_bytes
    from nightwatch.synth import SceneSpec, generate_frame

    spec = SceneSpec(seed=seed, width=size, height=size, frame_id=frame_id,
                     vessel_count=vessels, vessel_edge_clearance_px=20)
    frame, truth = generate_frame(spec)
    header, planes = frame_to_bytes(frame)
    return header, planes, truth


# Child process: submits the frames, processes with one worker and SIGKILLs
# itself just before writing the completion marker of ``crash_on``, i.e.
# after that frame's records already reached the logs.
KILL_SCRIPT = r"""
import os, signal, sys
sys.path.insert(0, {tests_dir!r})
from conftest import synth_frame_bytes
from nightwatch import service as svc
from nightwatch.config import PipelineConfig

crash_on = {crash_on!r}
real_write = svc._write_atomic

def write_or_die(path, data):
    if path.name == crash_on + ".done":
        os.kill(os.getpid(), signal.SIGKILL)
    real_write(path, data)

svc._write_atomic = write_or_die
s = svc.Service(PipelineConfig(output_dir={out!r}, workers=1))
for k, fid in enumerate({frame_ids!r}):
    h, p, _ = synth_frame_bytes(k, fid)
    s.submit_bytes(h, p)
s.start()
s.drain(120)
sys.exit(3)  # not reached: the crash frame kills the process
"""


def run_until_killed(out_dir, frame_ids, crash_on):
    """Run a service in a child process that dies mid-way through ``crash_on``."""
    import subprocess
    import sys
    from pathlib import Path

    script = KILL_SCRIPT.format(tests_dir=str(Path(__file__).parent), crash_on=crash_on,
                                out=str(out_dir), frame_ids=list(frame_ids))
    proc = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True,
                          timeout=300)
    return proc
