"""Streaming vessel detection for nighttime-lights satellite frames."""

from .assignment import FORBIDDEN, Assignment, brute_force_lap, solve_lap
from .config import ConfigError, PipelineConfig, load_config
from .correlate import AisPosition, AisStore, GateParams, correlate, interpolate_track
from .evaluation import ScoreReport, score
from .geo import GeoPoint, GeoPolygon, contains, haversine
from .geofence import InfrastructureIndex, load_infrastructure, suppress_near_infrastructure
from .pipeline import DetectionRecord, Pipeline, process_frame
from .raster_io import RasterFrame, extract_crop, geo_to_pixel, load_frame, pixel_to_geo, write_frame
from .stage1_detect import LightCandidate, Stage1Params, detect_light_sources
from .stage2_suppress import FlareGazetteer, Stage2Config, run_stage2
from .stage3_classify import ClassifierModel, classify, filter_detections, load_model, save_model
from .synth import GroundTruth, SceneSpec, generate_ais, generate_frame

__version__ = "0.1.0"
