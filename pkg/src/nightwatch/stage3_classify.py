"""Inference-only CNN filter over 4-channel crops.

Architecture family: up to four ``conv3x3`` layers (stride 1, zero
padding, ReLU), a global average pool, a single-output dense layer and a
logistic squash.

Model files are a JSON descriptor ``<stem>.json`` plus a little-endian
float32 blob ``<stem>.weights``.  For each conv layer the blob holds the
kernel ``(out, in, 3, 3)`` then the bias ``(out,)``; the dense layer holds
its weight ``(in,)`` then a scalar bias.  The descriptor stores the blob's
SHA-256.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster_io import CHANNELS, RasterFrame, extract_crop

MODEL_FORMAT = "nightwatch-cnn"
MODEL_VERSION = 1
MAX_CONV_LAYERS = 4
DEFAULT_THRESHOLD = 0.95
_LAYER_KINDS = ("conv3x3", "global_avg_pool", "dense")


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    layers: tuple           # layer descriptors (dicts)
    weights: tuple          # per-layer (kernel, bias) float32 arrays; () for pooling
    input_size: int = 9
    channels: tuple = CHANNELS
    name: str = ""

    def __post_init__(self):
        _validate(self)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Logits for a batch shaped (N, channels, size, size)."""
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (len(self.channels), self.input_size, self.input_size):
            raise ValueError(
                f"expected crops shaped {(len(self.channels), self.input_size, self.input_size)}, "
                f"got {x.shape[1:]}")
        for layer, params in zip(self.layers, self.weights):
            kind = layer["kind"]
            if kind == "conv3x3":
                kernel, bias = (p.astype(np.float64) for p in params)
                padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
                win = sliding_window_view(padded, (3, 3), axis=(2, 3))
                x = np.einsum("ncijkl,ockl->noij", win, kernel, optimize=True)
                x = np.maximum(x + bias[None, :, None, None], 0.0)
            elif kind == "global_avg_pool":
                x = x.mean(axis=(2, 3))
            else:
                w, b = (p.astype(np.float64) for p in params)
                x = x @ w + b[0]
        return x

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        return logistic(self.forward(batch))


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _validate(model: ClassifierModel):
    if model.input_size < 1 or model.input_size % 2 == 0:
        raise ModelFormatError("input_size must be odd and positive")
    if tuple(model.channels) != CHANNELS:
        raise ModelFormatError(
            f"model expects channels {list(model.channels)}, registry is {list(CHANNELS)}")
    if len(model.layers) != len(model.weights):
        raise ModelFormatError("one weight entry per layer required")
    kinds = [layer.get("kind") for layer in model.layers]
    for k in kinds:
        if k not in _LAYER_KINDS:
            raise ModelFormatError(f"unsupported layer kind {k!r}")
    n_conv = kinds.count("conv3x3")
    if kinds != ["conv3x3"] * n_conv + ["global_avg_pool", "dense"]:
        raise ModelFormatError("layers must be conv3x3 x N, global_avg_pool, dense")
    if n_conv > MAX_CONV_LAYERS:
        raise ModelFormatError(f"at most {MAX_CONV_LAYERS} conv layers supported")
    width = len(CHANNELS)
    for layer, params in zip(model.layers, model.weights):
        kind = layer["kind"]
        if kind == "conv3x3":
            cin, cout = int(layer["in_channels"]), int(layer["out_channels"])
            if cin != width:
                raise ModelFormatError(f"conv expects {cin} input channels, gets {width}")
            kernel, bias = params
            if kernel.shape != (cout, cin, 3, 3) or bias.shape != (cout,):
                raise ModelFormatError("conv weight shape mismatch")
            width = cout
        elif kind == "dense":
            fin, fout = int(layer["in_features"]), int(layer.get("out_features", 1))
            if fin != width or fout != 1:
                raise ModelFormatError("dense layer must map the pooled features to one logit")
            w, b = params
            if w.shape != (fin,) or b.shape != (1,):
                raise ModelFormatError("dense weight shape mismatch")
        elif params:
            raise ModelFormatError("pooling layer takes no weights")


def _param_shapes(layers):
    shapes = []
    for layer in layers:
        kind = layer.get("kind")
        if kind == "conv3x3":
            o, i = int(layer["out_channels"]), int(layer["in_channels"])
            shapes.append([(o, i, 3, 3), (o,)])
        elif kind == "dense":
            shapes.append([(int(layer["in_features"]),), (1,)])
        elif kind == "global_avg_pool":
            shapes.append([])
        else:
            raise ModelFormatError(f"unsupported layer kind {kind!r}")
    return shapes


def build_model(layers, params, input_size=9, name="") -> ClassifierModel:
    weights = tuple(tuple(np.asarray(p, dtype=np.float32) for p in ps) for ps in params)
    return ClassifierModel(layers=tuple(dict(layer) for layer in layers), weights=weights,
                           input_size=input_size, name=name)


def save_model(model: ClassifierModel, path) -> Path:
    stem = Path(path)
    if stem.suffix in (".json", ".weights"):
        stem = stem.with_suffix("")
    blob = b"".join(p.astype("<f4").tobytes() for ps in model.weights for p in ps)
    desc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": model.name,
        "input_size": model.input_size,
        "channels": list(model.channels),
        "layers": [dict(layer) for layer in model.layers],
        "weights_file": stem.name + ".weights",
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_name(stem.name + ".weights").write_bytes(blob)
    hpath = stem.with_name(stem.name + ".json")
    hpath.write_text(json.dumps(desc, indent=1))
    return hpath


def load_model(path) -> ClassifierModel:
    """Load and validate a model descriptor + weights, verifying the checksum."""
    hpath = Path(path)
    if hpath.suffix != ".json":
        hpath = hpath.with_name(hpath.name + ".json") if hpath.suffix != ".weights" \
            else hpath.with_suffix(".json")
    desc = json.loads(hpath.read_text())
    if desc.get("format") != MODEL_FORMAT or desc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format {desc.get('format')!r} "
                               f"v{desc.get('version')!r}")
    if len(desc.get("channels", [])) != len(CHANNELS):
        raise ModelFormatError(
            f"model demands {len(desc.get('channels', []))} channels; registry has {len(CHANNELS)}")
    blob = (hpath.parent / desc["weights_file"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != desc.get("sha256"):
        raise ModelFormatError("weights checksum mismatch")
    layers = desc["layers"]
    shapes = _param_shapes(layers)
    flat = np.frombuffer(blob, dtype="<f4")
    expected = sum(int(np.prod(s)) for ss in shapes for s in ss)
    if flat.size * 4 != len(blob) or flat.size != expected:
        raise ModelFormatError(f"weights hold {flat.size} floats, architecture needs {expected}")
    params, pos = [], 0
    for ss in shapes:
        ps = []
        for s in ss:
            k = int(np.prod(s))
            ps.append(flat[pos:pos + k].reshape(s).astype(np.float32))
            pos += k
        params.append(ps)
    return ClassifierModel(layers=tuple(layers), weights=tuple(tuple(p) for p in params),
                           input_size=int(desc["input_size"]),
                           channels=tuple(desc["channels"]), name=desc.get("name", ""))


def random_model(seed=0, conv_channels=(4,), input_size=9, scale=0.5) -> ClassifierModel:
    """Random-weight model for tests and plumbing checks (not for real filtering)."""
    rng = np.random.default_rng(seed)
    layers, params, width = [], [], len(CHANNELS)
    for out in conv_channels:
        layers.append({"kind": "conv3x3", "in_channels": width, "out_channels": int(out)})
        params.append([rng.normal(0, scale, (out, width, 3, 3)), rng.normal(0, scale, out)])
        width = int(out)
    layers += [{"kind": "global_avg_pool"}, {"kind": "dense", "in_features": width}]
    params += [[], [rng.normal(0, scale, width), rng.normal(0, scale, 1)]]
    return build_model(layers, params, input_size, name=f"random-{seed}")


def reference_model(noise_sigma=1.0, input_size=9) -> ClassifierModel:
    """Hand-set point-source model used when no trained weights are supplied.

    Layer 1 computes a discrete Laplacian of radiance with a bias of -4
    sigma (responds only to sharp spikes well above the noise), a copy of the
    land mask, and a constant channel (zero kernel, bias 1).  Zero padding
    makes the Laplacian fire along the crop border whenever the background
    is not zero; layer 2 sums the constant channel over 3x3, which is 9 only
    away from the border, and uses it to gate the Laplacian off there.  The
    dense layer turns mean spike energy into confidence and penalises land.
    Tuned for radiance with the given noise level.
    """
    gate = 1000.0
    lap = np.full((3, 3), -1.0 / 8.0)
    lap[1, 1] = 1.0
    k1 = np.zeros((3, len(CHANNELS), 3, 3))
    k1[0, 0] = lap / noise_sigma
    k1[1, 1, 1, 1] = 1.0
    b1 = np.array([-4.0, 0.0, 1.0])
    k2 = np.zeros((2, 3, 3, 3))
    k2[0, 0, 1, 1] = 1.0
    k2[0, 2] = gate
    k2[1, 1, 1, 1] = 1.0
    b2 = np.array([-9.0 * gate, 0.0])
    layers = [{"kind": "conv3x3", "in_channels": 4, "out_channels": 3},
              {"kind": "conv3x3", "in_channels": 3, "out_channels": 2},
              {"kind": "global_avg_pool"},
              {"kind": "dense", "in_features": 2}]
    scale = 81.0 / (input_size * input_size)
    params = [[k1, b1], [k2, b2], [],
              [np.array([120.0 / scale, -6.0]), np.array([-2.2])]]
    return build_model(layers, params, input_size, name="reference-point-source")


def crop_batch(frame: RasterFrame, cands, size: int) -> np.ndarray:
    """Stack model-ordered crops; channels the frame lacks are zero, NaN -> 0."""
    batch = np.zeros((len(cands), len(CHANNELS), size, size), dtype=np.float32)
    present = [n for n in CHANNELS if frame.has_channel(n)]
    slots = [CHANNELS.index(n) for n in present]
    for k, c in enumerate(cands):
        crop = extract_crop(frame, (c.row, c.col), size, 0.0, channels=present)
        batch[k, slots] = crop.planes
    return np.nan_to_num(batch, nan=0.0, posinf=0.0, neginf=0.0)


def classify(model: ClassifierModel, crop) -> float:
    """Confidence in [0, 1] for one crop (a Crop or a (4, size, size) array)."""
    planes = getattr(crop, "planes", crop)
    names = getattr(crop, "channels", CHANNELS)
    if tuple(names) != CHANNELS:
        raise ValueError(f"crop channels {list(names)} are not in registry order")
    planes = np.asarray(planes)
    if planes.shape != (len(CHANNELS), model.input_size, model.input_size):
        raise ValueError(f"crop shape {planes.shape} does not match model input "
                         f"{(len(CHANNELS), model.input_size, model.input_size)}")
    return float(model.predict_proba(planes[None])[0])


def filter_detections(cands, frame: RasterFrame, model: ClassifierModel,
                      threshold: float = DEFAULT_THRESHOLD):
    """Split candidates into (accepted, rejected) by confidence >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be within [0, 1]")
    cands = list(cands)
    if not cands:
        return [], []
    probs = model.predict_proba(crop_batch(frame, cands, model.input_size))
    scored = [replace(c, confidence=float(p)) for c, p in zip(cands, probs)]
    accepted = [c for c in scored if c.confidence >= threshold]
    rejected = [c for c in scored if c.confidence < threshold]
    return accepted, rejected
