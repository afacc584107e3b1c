"""Generalized few-shot LiDAR segmentation with tracked pseudo labels and low-rank adapters."""

__version__ = "0.1.0"

from .classspace import ClassSpace, build_class_space, remap_for_stage, semantic_kitti_class_space
from .errors import FslidarError
from .lora import apply_strategy, merge_lora, trainable_parameter_count, wrap_with_lora
from .metrics import ConfusionMatrix, splits
from .network import SegmentationModel
from .pointcloud import LidarScan, RangeImage, back_project, spherical_project
from .tracker import AugmentedDataset, GeometricTracker, TrackConfig, build_augmented_dataset
from .trainer import TrainConfig, base_train, evaluate, novel_finetune, sample_few_shot

__all__ = [
    "ClassSpace", "build_class_space", "remap_for_stage", "semantic_kitti_class_space", "FslidarError",
    "apply_strategy", "merge_lora", "trainable_parameter_count", "wrap_with_lora", "ConfusionMatrix",
    "splits", "SegmentationModel", "LidarScan", "RangeImage", "back_project", "spherical_project",
    "AugmentedDataset", "GeometricTracker", "TrackConfig", "build_augmented_dataset", "TrainConfig",
    "base_train", "evaluate", "novel_finetune", "sample_few_shot",
]
