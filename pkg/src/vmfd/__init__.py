"""Cross-modal image-to-point contrastive distillation with von Mises-Fisher class regularization."""

__version__ = "0.1.0"

from .correspondence import CameraModel, PointPixelPairs, project_points, project_scene
from .encoders import DistillationModel, load_checkpoint, save_checkpoint
from .losses import combined_loss, kl_vmf_loss, ppnce_loss, supervised_nce_loss
from .sampling import PairSampler, compute_weights, draw_pairs, kde_density
from .synthdata import Scene, SceneConfig, generate_dataset, generate_scene, load_scene, save_scene
from .trainer import CrossModalDistiller, LinearProbe, TrainConfig, evaluate, train
from .vmf import (
    ClassStatistics,
    VmfParams,
    VonMisesFisher,
    estimate_params,
    log_bessel_i,
    log_norm_const,
    sample_vmf,
    vmf_log_pdf,
)

__all__ = [
    "CameraModel",
    "ClassStatistics",
    "CrossModalDistiller",
    "DistillationModel",
    "LinearProbe",
    "PairSampler",
    "PointPixelPairs",
    "Scene",
    "SceneConfig",
    "TrainConfig",
    "VmfParams",
    "VonMisesFisher",
    "combined_loss",
    "compute_weights",
    "draw_pairs",
    "estimate_params",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "kde_density",
    "kl_vmf_loss",
    "load_checkpoint",
    "load_scene",
    "log_bessel_i",
    "log_norm_const",
    "ppnce_loss",
    "project_points",
    "project_scene",
    "sample_vmf",
    "save_checkpoint",
    "save_scene",
    "supervised_nce_loss",
    "train",
    "vmf_log_pdf",
]
