"""Retinal vessel segmentation pipeline."""

from .data import (FundusSample, ValidationError, discover_dataset, green_channel,
                   jaccard_distance, load_sample, resize_sample)
from .invariant import InvariantConfig, make_invariant_input
from .balance import balance_dataset
from .augment import AugmentConfig, ChannelStats, augment_sample, reference_stats
from .losses import LossConfig, bce_loss, combined_loss, dice_loss
from .model import DualEncoderNet, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .metrics import (ConfusionCounts, MetricsReport, confusion, evaluate_dataset,
                      roc_auc, segmentation_metrics)

__version__ = "0.1.0"
