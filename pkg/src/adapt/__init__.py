"""Adaptive point transformer: point-cloud classification under inference-time token budgets."""

from .dropping import DropSchedule, drop_targets, kept_count
from .model import AdaptivePointTransformer, ModelConfig, build_model
from .pointcloud import PointCloud, SynthConfig, synth_dataset
from .training import TrainConfig, evaluate, fit, init_state

__version__ = "0.1.0"

__all__ = [
    "AdaptivePointTransformer",
    "DropSchedule",
    "ModelConfig",
    "PointCloud",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "drop_targets",
    "evaluate",
    "fit",
    "init_state",
    "kept_count",
    "synth_dataset",
]
