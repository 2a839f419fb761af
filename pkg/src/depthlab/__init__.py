"""Sparse-to-dense depth completion with segmentation guidance, on numpy and scipy.

The package holds a small reverse-mode autodiff engine (``tensor``, ``functional``,
``nn``), camera geometry, sparse-depth preprocessing, a raycast scene generator,
an on-disk dataset format, the depth and pose networks, the training losses and
loop, and evaluation. ``python -m depthlab`` exposes the same pieces as a CLI.
"""

from .dataset_io import AugmentConfig, DatasetFormatError, Manifest, generate_dataset, load_batch
from .evaluation import MetricsRecord, aggregate, benchmark, compute_metrics, evaluate, infer_directory
from .geometry import Intrinsics, Pose, inverse_warp, rodrigues
from .losses import LossWeights, Regime, normalized_l1, photometric_loss, smoothness_loss, total_loss, weighted_l1
from .networks import DepthNet, ModelKind, NetworkConfig, PoseNet, count_parameters, load_model, save_model
from .preprocess import outlier_filter, spp_densify
from .records import SampleRecord, SegmentationMap
from .synth import SparsifyConfig, random_scene, render
from .tensor import EmptySupportError, Tensor, default_dtype
from .trainer import TrainConfig, pretrain_then_adapt, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "DatasetFormatError", "Manifest", "generate_dataset", "load_batch",
    "MetricsRecord", "aggregate", "benchmark", "compute_metrics", "evaluate", "infer_directory",
    "Intrinsics", "Pose", "inverse_warp", "rodrigues",
    "LossWeights", "Regime", "normalized_l1", "photometric_loss", "smoothness_loss", "total_loss", "weighted_l1",
    "DepthNet", "ModelKind", "NetworkConfig", "PoseNet", "count_parameters", "load_model", "save_model",
    "outlier_filter", "spp_densify", "SampleRecord", "SegmentationMap",
    "SparsifyConfig", "random_scene", "render", "EmptySupportError", "Tensor", "default_dtype",
    "TrainConfig", "pretrain_then_adapt", "train",
]
