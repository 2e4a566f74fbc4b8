"""CPU engine for M2U-Net retinal vessel segmentation.

The public surface: build_m2unet for the canonical graph, train/init_weights
for optimization, save_weights/load_weights/install_weights for checkpoints,
the data module for datasets and augmentation, and the metrics module for
Dice/accuracy/AuC with the crop adjustment.  `python3 -m m2unet.cli` or the
`m2unet` entry point exposes the same things as commands.
"""

from .data import (AugmentConfig, DatasetSpec, Sample, augment, crop,
                   dataset_spec, load_sample, load_split_ids,
                   make_validation, split)
from .errors import (ConfigError, DataError, EngineError, FormatError,
                     NumericError, ShapeMismatchError, UsageError)
from .fileio import (install_weights, load_weights, read_fixture, read_image,
                     read_mask, save_weights, write_fixture)
from .graph import (CANONICAL_PARAM_TOTAL, ModelGraph, build_m2unet,
                    hidden_width, m2u_rows)
from .losses import bce_loss, jbce_loss, soft_jaccard
from .metrics import (ConfusionCounts, PRPoint, accuracy_adjusted, confusion,
                      default_thresholds, dice_score, pr_curve, roc_auc)
from .tensor import BatchNormParams, ConvWeights, Tensor
from .train import (AdamWState, TrainConfig, TrainResult, adamw_step,
                    init_weights, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "DatasetSpec", "Sample", "augment", "crop",
    "dataset_spec", "load_sample", "load_split_ids", "make_validation",
    "split",
    "ConfigError", "DataError", "EngineError", "FormatError", "NumericError",
    "ShapeMismatchError", "UsageError",
    "install_weights", "load_weights", "read_fixture", "read_image",
    "read_mask", "save_weights", "write_fixture",
    "CANONICAL_PARAM_TOTAL", "ModelGraph", "build_m2unet", "hidden_width",
    "m2u_rows",
    "bce_loss", "jbce_loss", "soft_jaccard",
    "ConfusionCounts", "PRPoint", "accuracy_adjusted", "confusion",
    "default_thresholds", "dice_score", "pr_curve", "roc_auc",
    "BatchNormParams", "ConvWeights", "Tensor",
    "AdamWState", "TrainConfig", "TrainResult", "adamw_step", "init_weights",
    "train",
    "__version__",
]
