"""Dual-branch CNN / window-attention depth completion for transparent objects."""
from .data import Batch, RgbdSample, ToySceneConfig, augment, generate_toy_scene, load_sample, make_batch
from .estimator import TDCNetRegressor, check_samples
from .metrics import MetricsReport, compute_metrics, error_map
from .model import DepthPrediction, ModelConfig, TDCNet, count_params
from .objective import LossState, depth_loss, smooth_loss, surface_normals, total_loss, update_weight

__version__ = "0.1.0"

__all__ = [
    "Batch", "RgbdSample", "ToySceneConfig", "augment", "generate_toy_scene", "load_sample", "make_batch",
    "TDCNetRegressor", "check_samples",
    "MetricsReport", "compute_metrics", "error_map",
    "DepthPrediction", "ModelConfig", "TDCNet", "count_params",
    "LossState", "depth_loss", "smooth_loss", "surface_normals", "total_loss", "update_weight",
]
