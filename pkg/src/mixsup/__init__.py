"""Segmentation from a few full masks and many partially labeled images."""

from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetSplit, SampleRecord, TaskConstants, generate_task, make_setting
from .estimator import MixedSupervisedSegmenter, NumericalAbort
from .losses import LossWeights, PartialLabelMask
from .metrics import EvalResult, dice, hd95
from .model import DualBranchUNet

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DatasetSplit", "DualBranchUNet", "EvalResult", "ExperimentConfig", "LossWeights",
    "MixedSupervisedSegmenter", "NumericalAbort", "PartialLabelMask", "SampleRecord", "TaskConstants",
    "dice", "generate_task", "hd95", "load_config", "make_setting",
]
