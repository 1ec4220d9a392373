"""Training objectives: border-weighted BCE + IoU for masks, dice for edges.

Pixel weights emphasize each mask's boundary band: w = 1 + gain * |box(y) - y|
is near 1 inside flat regions and rises where a box average disagrees with
the label, i.e. along edges. Both the BCE and the IoU terms share the same
weight map. Multi-level supervision halves the weight per level.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


def box_filter(y, k):
    """k x k sliding box average with zero padding (always divides by k*k).

    y: (B, C, H, W) ndarray. Uses integral images; windows that stick out
    of the map simply sum fewer cells.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 4:
        raise ShapeMismatch(f"box_filter expects rank 4, got {y.shape}")
    if k < 1 or k % 2 == 0:
        raise ShapeMismatch(f"box size must be odd and positive, got {k}")
    r = k // 2
    B, C, H, W = y.shape
    ii = np.zeros((B, C, H + 1, W + 1))
    np.cumsum(np.cumsum(y, axis=2), axis=3, out=ii[:, :, 1:, 1:])
    i0 = np.clip(np.arange(H) - r, 0, H)
    i1 = np.clip(np.arange(H) + r + 1, 0, H)
    j0 = np.clip(np.arange(W) - r, 0, W)
    j1 = np.clip(np.arange(W) + r + 1, 0, W)
    s = (ii[:, :, i1[:, None], j1[None, :]] - ii[:, :, i0[:, None], j1[None, :]]
         - ii[:, :, i1[:, None], j0[None, :]] + ii[:, :, i0[:, None], j0[None, :]])
    return s / float(k * k)


def border_weights(target, k=15, gain=5.0):
    """1 + gain * |box(y) - y|: flat regions get weight 1, borders more."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    return 1.0 + gain * np.abs(box_filter(t, k) - t)


def _check_pair(logits, target):
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    if logits.ndim != 4:
        raise ShapeMismatch(f"loss inputs must be rank 4, got {logits.shape}")


def _stable_bce(logits, target):
    # relu(p) - p*y + log(1 + exp(-|p|)), finite for any logit magnitude
    return T.relu(logits) - logits * target + T.softplus(T.neg(T.tabs(logits)))


def weighted_bce(logits, target, weights):
    """Per-image weighted mean of elementwise BCE, then a batch mean."""
    logits, target = T._as_tensor(logits), T._as_tensor(target)
    _check_pair(logits, target)
    w = Tensor(np.broadcast_to(np.asarray(weights, dtype=np.float64),
                               logits.shape).copy())
    num = (w * _stable_bce(logits, target)).sum(axis=(1, 2, 3))
    den = Tensor(w.data.sum(axis=(1, 2, 3)))
    return (num / den).mean()


def weighted_iou(logits, target, weights):
    """1 - (inter + 1)/(union - inter + 1) on sigmoid scores, per image."""
    logits, target = T._as_tensor(logits), T._as_tensor(target)
    _check_pair(logits, target)
    w = Tensor(np.broadcast_to(np.asarray(weights, dtype=np.float64),
                               logits.shape).copy())
    p = T.sigmoid(logits)
    inter = (p * target * w).sum(axis=(1, 2, 3))
    union = ((p + target) * w).sum(axis=(1, 2, 3))
    return (1.0 - (inter + 1.0) / (union - inter + 1.0)).mean()


def structure_loss(logits, target, k=15, gain=5.0):
    """Border-weighted BCE plus border-weighted IoU under one weight map."""
    w = border_weights(target, k=k, gain=gain)
    return weighted_bce(logits, target, w) + weighted_iou(logits, target, w)


def dice_loss(logits, target, smooth=1.0):
    logits, target = T._as_tensor(logits), T._as_tensor(target)
    _check_pair(logits, target)
    p = T.sigmoid(logits)
    inter = (p * target).sum(axis=(1, 2, 3))
    total = p.sum(axis=(1, 2, 3)) + target.sum(axis=(1, 2, 3))
    return (1.0 - (2.0 * inter + smooth) / (total + smooth)).mean()


def level_target(gt, size):
    """Nearest-resized ground truth for one supervision level (no gradient)."""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if gt.shape[2:] == tuple(size):
        return Tensor(gt.data)
    return Tensor(T.interpolate(Tensor(gt.data), size, mode="nearest").data)


def total_seg_loss(output, mask_gt, edge_gt):
    """Level-weighted sum over all mask and edge heads.

    Level k gets weight 2**-(k-1); ground truth is nearest-downsampled to
    each head's resolution.
    """
    loss = None
    for k, m in enumerate(output.masks):
        g = level_target(mask_gt, (m.shape[2], m.shape[3]))
        term = structure_loss(m, g) * (0.5 ** k)
        loss = term if loss is None else loss + term
    for k, e in enumerate(output.edges):
        g = level_target(edge_gt, (e.shape[2], e.shape[3]))
        loss = loss + dice_loss(e, g) * (0.5 ** k)
    return loss
