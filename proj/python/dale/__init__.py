"""Noisy-label segmentation with learned per-pixel label confidence."""

from ._dale import (
    DaleError,
    asd,
    avg_entropy,
    bures_w2,
    default_config,
    dice,
    edge_ratio,
    evaluate_checkpoint,
    hd95,
    mask_values,
    miou,
    patch_scores,
    synthetic_splits,
    train,
    write_synthetic_dataset,
)

__all__ = [
    "DaleError",
    "asd",
    "avg_entropy",
    "bures_w2",
    "default_config",
    "dice",
    "edge_ratio",
    "evaluate_checkpoint",
    "hd95",
    "mask_values",
    "miou",
    "patch_scores",
    "synthetic_splits",
    "train",
    "write_synthetic_dataset",
]
