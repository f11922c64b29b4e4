"""Gaussian Radar Transformer for semantic segmentation of radar point clouds."""

from grt.backbone import GaussianRadarTransformer, GRTConfig, build, predict
from grt.data import RadarPointCloud, SyntheticSceneConfig, synth_generate
from grt.metrics import CLASS_NAMES, ConfusionMatrix

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfusionMatrix",
    "GRTConfig",
    "GaussianRadarTransformer",
    "RadarPointCloud",
    "SyntheticSceneConfig",
    "build",
    "predict",
    "synth_generate",
]
