"""Pipeline configuration loaded from JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .correlate import GateParams
from .raster_io import DEFAULT_CROP_SIZE
from .stage1_detect import Stage1Params
from .stage2_suppress import Stage2Config
from .stage3_classify import DEFAULT_THRESHOLD


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    stage1: Stage1Params = field(default_factory=Stage1Params)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    gate: GateParams = field(default_factory=GateParams)
    model_path: str | None = None
    reference_noise_sigma: float = 1.0
    threshold: float = DEFAULT_THRESHOLD
    crop_size: int = DEFAULT_CROP_SIZE
    infrastructure_path: str | None = None
    ais_path: str | None = None
    output_dir: str = "nightwatch-out"
    inbox_dir: str | None = None
    write_crops: bool = True
    workers: int = 2
    queue_size: int = 64
    poll_interval_s: float = 1.0
    max_frame_age_s: float = 6 * 3600.0
    stage1_tiles: int = 1
    host: str = "127.0.0.1"
    port: int = 8080

    def validate(self, check_files: bool = True) -> "PipelineConfig":
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must be within [0, 1]")
        if self.crop_size < 1 or self.crop_size % 2 == 0:
            raise ConfigError("crop_size must be odd and positive")
        if self.workers < 1 or self.queue_size < 1:
            raise ConfigError("workers and queue_size must be >= 1")
        if self.gate.base_uncertainty_m <= 0 or self.gate.max_speed_mps < 0:
            raise ConfigError("gate parameters out of range")
        if check_files:
            for name in ("model_path", "infrastructure_path", "ais_path"):
                p = getattr(self, name)
                if p is not None and not _exists(name, p):
                    raise ConfigError(f"{name} {p!r} does not exist")
        return self

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"gazetteer_path"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            s1 = Stage1Params(**d.pop("stage1", {}))
            s2d = dict(d.pop("stage2", {}))
            if "gazetteer_path" in d:
                s2d["gazetteer_path"] = d.pop("gazetteer_path")
            s2 = Stage2Config.from_dict(s2d, base_dir=base_dir)
            gate = GateParams(**d.pop("gate", {}))
            cfg = cls(stage1=s1, stage2=s2, gate=gate, **d)
        except (TypeError, ValueError, KeyError, OSError) as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for name in ("model_path", "infrastructure_path", "ais_path", "output_dir",
                         "inbox_dir"):
                p = getattr(cfg, name)
                if p is not None and not Path(p).is_absolute():
                    setattr(cfg, name, str(Path(base_dir) / p))
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stage1"] = asdict(self.stage1)
        d["stage2"] = self.stage2.to_dict()
        d["gate"] = asdict(self.gate)
        return d


def _exists(name, p):
    path = Path(p)
    if name == "model_path" and path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    return path.exists()


def load_config(path) -> PipelineConfig:
    """Parse and validate a config file; relative paths resolve against its folder."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except ValueError as exc:
        raise ConfigError(f"config file {str(path)!r} is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(data, base_dir=path.parent).validate()
