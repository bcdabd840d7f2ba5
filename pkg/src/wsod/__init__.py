"""Weakly supervised object detection with guided attention, MIL mining,
online refinement and a jointly trained regression head."""

from .boxes import Box, Detection
from .data import Dataset, ImageRecord, SynthConfig, gen_synthetic, load_dataset, save_dataset
from .metrics import average_precision, corloc, evaluate, nms
from .train import Checkpoint, TrainConfig, infer, train

__all__ = ["Box", "Detection", "Dataset", "ImageRecord", "SynthConfig", "gen_synthetic", "load_dataset",
           "save_dataset", "average_precision", "corloc", "evaluate", "nms", "Checkpoint", "TrainConfig",
           "infer", "train"]
