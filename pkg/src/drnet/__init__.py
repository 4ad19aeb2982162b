"""Retinal vessel segmentation for Scanning Laser Ophthalmoscopy images.

A dense-residual encoder-decoder with structured dropout regularization,
adaptive multi-scale feature aggregation, a reproducible training
protocol, and a Sen/Spe/Acc/AUC/MCC evaluation harness.
"""

from .blocks import (
    AdaptiveAggregation,
    AggregationSpec,
    Compression,
    DoubleResidualBlock,
    DropBlock2d,
    DropBlockConfig,
    Resample,
    dropblock_apply,
    dropblock_gamma,
)
from .data import ImageSample, DatasetSplit, crop_back, load_dataset, pad_to, split_train_val
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    acc,
    auc,
    confusion_counts,
    evaluate_dataset,
    mcc,
    sen,
    spe,
)
from .model import (
    DRNet,
    ModelConfig,
    ParameterStore,
    build,
    load_model,
    load_weights,
    parameter_count,
    save_weights,
)
from .training import TrainConfig, TrainHistory, bce_loss, train, validation_accuracy

__version__ = "0.1.0"
