"""Tiled object detection, calibration and counting on georeferenced rasters."""

from .backend import (
    Detection,
    ExternalBackend,
    MaskRLE,
    OracleBackend,
    OracleNoise,
    TilePrediction,
    iou_xyxy,
    rle_decode,
    rle_encode,
)
from .calibration import (
    CalibrationModel,
    CalibrationPair,
    fit,
    laace0,
    laece0,
    pair_with_iou,
    select_threshold,
)
from .counteval import MatchReport, evaluate, match_directional
from .errors import BackendError, ConfigError, DataError, PipelineError
from .fusion import GeoCenter, GlobalDetection, centers_to_geo, nms, to_global
from .georaster import GeoTransform, TileWindow, TilingConfig, open_raster, tile_windows
from .synth import SceneConfig, SceneTruth, generate

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "CalibrationModel",
    "CalibrationPair",
    "ConfigError",
    "DataError",
    "Detection",
    "ExternalBackend",
    "GeoCenter",
    "GeoTransform",
    "GlobalDetection",
    "MaskRLE",
    "MatchReport",
    "OracleBackend",
    "OracleNoise",
    "PipelineError",
    "SceneConfig",
    "SceneTruth",
    "TilePrediction",
    "TileWindow",
    "TilingConfig",
    "centers_to_geo",
    "evaluate",
    "fit",
    "generate",
    "iou_xyxy",
    "laace0",
    "laece0",
    "match_directional",
    "nms",
    "open_raster",
    "pair_with_iou",
    "rle_decode",
    "rle_encode",
    "select_threshold",
    "tile_windows",
    "to_global",
    "__version__",
]
