"""Multi-scale patch feature network for unoriented point-cloud normals, plus classical baselines."""

from .autodiff import Tensor, backward
from .baselines import eigh3, estimate_normals, jet_normal, pca_normal
from .data import CorruptionSpec, ShapeSpec, make_rng, synth_shape
from .geometry import Patch, PointCloud, SpatialIndex, extract_patch, extract_patches
from .losses import EvalReport, LossWeights, angle_errors, normal_loss, pgp_curve, rmse, total_loss
from .model import ModelConfig, init_params, model_forward

__all__ = [
    "Tensor", "backward", "eigh3", "estimate_normals", "jet_normal", "pca_normal",
    "CorruptionSpec", "ShapeSpec", "make_rng", "synth_shape", "Patch", "PointCloud",
    "SpatialIndex", "extract_patch", "extract_patches", "EvalReport", "LossWeights",
    "angle_errors", "normal_loss", "pgp_curve", "rmse", "total_loss", "ModelConfig",
    "init_params", "model_forward",
]
