"""Encoder-decoder semantic segmentation on a small numpy autodiff engine."""

from .arch import VariantKind, build_variant, count_params, forward, predict, receptive_field, storage_cost
from .metrics import SegmentationEvaluator, bf_score, class_average, global_accuracy, mean_iou
from .modelio import load_model, save_model
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, train_loop

__all__ = [
    "Tensor",
    "TrainConfig",
    "SegmentationEvaluator",
    "VariantKind",
    "backward",
    "bf_score",
    "build_variant",
    "class_average",
    "count_params",
    "forward",
    "global_accuracy",
    "load_model",
    "mean_iou",
    "no_grad",
    "predict",
    "receptive_field",
    "save_model",
    "storage_cost",
    "train_loop",
]
__version__ = "0.1.0"
