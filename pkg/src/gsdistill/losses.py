"""Reconstruction and distillation losses.

All functions accept numpy arrays or torch tensors (the training loops pass
tensors so gradients flow).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import LatentGrid
from .netkit import ShapeError

LAMBDA_DEPTH = 0.2
LAMBDA_3D = 1.5
MASK_ALPHA = 0.5


@dataclass(frozen=True)
class LossConfig:
    lambda_depth: float = LAMBDA_DEPTH
    lambda_3d: float = LAMBDA_3D

    def __post_init__(self):
        if self.lambda_depth < 0 or self.lambda_3d < 0:
            raise ValueError("loss weights must be non-negative")


def _check(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _as(x):
    return x if hasattr(x, "shape") and not isinstance(x, (list, tuple)) else np.asarray(x, dtype=np.float64)


def rgb_loss(outputs, targets):
    """Mean squared error over objects, views, pixels and channels."""
    outputs, targets = _as(outputs), _as(targets)
    _check(outputs, targets)
    return ((outputs - targets) ** 2).mean()


def depth_loss(outputs, targets, masks):
    """Mean squared depth error over masked pixels; 0 for an empty mask."""
    outputs, targets = _as(outputs), _as(targets)
    _check(outputs, targets)
    masks = _as(masks)
    _check(outputs, masks)
    masks = masks * 1.0
    count = masks.sum()
    if float(count) == 0.0:
        return (outputs * 0.0).sum()
    return (((outputs - targets) ** 2) * masks).sum() / count


def depth_mask(gt_alpha):
    return _as(gt_alpha) > MASK_ALPHA


def loss_3d(rgb_term, depth_term, cfg: LossConfig = LossConfig()):
    return rgb_term + cfg.lambda_depth * depth_term


def loss_2d(z_hat, z_gt):
    z_hat = z_hat.data if isinstance(z_hat, LatentGrid) else z_hat
    z_gt = z_gt.data if isinstance(z_gt, LatentGrid) else z_gt
    z_hat, z_gt = _as(z_hat), _as(z_gt)
    _check(z_hat, z_gt)
    return ((z_hat - z_gt) ** 2).mean()


def loss_distill(l2d, l3d, cfg: LossConfig = LossConfig()):
    return l2d + cfg.lambda_3d * l3d
