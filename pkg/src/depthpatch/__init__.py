"""Adversarial patches against monocular depth estimation.

Optimizes an object-anchored patch with a penalized depth loss under random
transformations, and measures the damage with masked disparity metrics and
input-transformation defenses.
"""

from depthpatch.scene_io import (
    DatasetSplit,
    Detection,
    SceneSample,
    SceneSpec,
    generate_synthetic_scenes,
    load_dataset,
    read_disparity,
    save_dataset,
    write_disparity,
)
from depthpatch.masks import DetectorConfig, MaskPair, PlacementRect, build_masks, filter_detections, place_patch_geometry
from depthpatch.transforms import TransformParams, TransformRanges, sample_params, transform_patch
from depthpatch.applier import apply_all, apply_patch
from depthpatch.models import AnalyticDepthModel, DepthModel, ToyDepthNet, load_model, pretrain_toy_model, save_model
from depthpatch.losses import LossConfig, TargetDepthSpec, loss_d1, loss_d2, loss_depth, loss_total, loss_tv
from depthpatch.trainer import AttackConfig, TrainingLog, resume, save_checkpoint, train_patch
from depthpatch.evaluation import (
    DefenseSpec,
    MetricsReport,
    apply_defense,
    compute_Ed,
    compute_MSE,
    compute_Ra,
    evaluate_defended,
    evaluate_patch,
)

__version__ = "0.1.0"
