"""Attention pyramid network for semantic segmentation, written on numpy.

The main entry points are re-exported here; see the submodules for the
full API.
"""
from .attention import AttentionWeights, ScaleOutputs, deep_supervision_loss, fuse
from .augment import ControlPointSet, DeformSpec, common_augment, mls_affine_field, mls_affine_map, warp_pair
from .data import DatasetManifest, SegDataset, SynthSpec, generate, generate_samples, read_manifest
from .errors import (
    ApnetError,
    ConfigError,
    DataError,
    DecodeError,
    GenerationError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .metrics import ConfusionMatrix, iou_per_class, mean_iou, pixel_accuracy, report
from .model import ApnetConfig, forward, init_params, load_checkpoint, predict, save_checkpoint
from .spp import SppConfig, spp_bin_geometry, spp_forward
from .trainer import PRESETS, TrainConfig, evaluate, poly_lr, train

__version__ = "0.1.0"

__all__ = [
    "ApnetConfig", "ApnetError", "AttentionWeights", "ConfigError", "ConfusionMatrix", "ControlPointSet",
    "DataError", "DatasetManifest", "DecodeError", "DeformSpec", "GenerationError", "NumericError", "PRESETS",
    "ScaleOutputs", "SegDataset", "ShapeError", "SppConfig", "SynthSpec", "TrainConfig",
    "TrainingDivergedError", "UndefinedMetricError", "common_augment", "deep_supervision_loss", "evaluate",
    "forward", "fuse", "generate", "generate_samples", "init_params", "iou_per_class", "load_checkpoint",
    "mean_iou", "mls_affine_field", "mls_affine_map", "pixel_accuracy", "poly_lr", "predict", "read_manifest",
    "report", "save_checkpoint", "spp_bin_geometry", "spp_forward", "train", "warp_pair",
]
