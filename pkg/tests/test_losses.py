"""Loss tests: loop oracles for the filters and both pixel objectives."""

import numpy as np
import pytest

import multicos.tensor as T
from multicos.bfser import BFSer, SegmentationOutput
from multicos.errors import ShapeMismatch
from multicos.losses import (border_weights, box_filter, dice_loss, level_target,
                             structure_loss, total_seg_loss, weighted_bce,
                             weighted_iou)
from multicos.tensor import Tensor
from oracles import box_filter_loop


def _np_bce(p, y):
    return np.maximum(p, 0.0) - p * y + np.log1p(np.exp(-np.abs(p)))


def _np_wbce(p, y, w):
    num = (w * _np_bce(p, y)).sum(axis=(1, 2, 3))
    return (num / w.sum(axis=(1, 2, 3))).mean()


def _np_wiou(p, y, w):
    s = 1.0 / (1.0 + np.exp(-p))
    inter = (s * y * w).sum(axis=(1, 2, 3))
    union = ((s + y) * w).sum(axis=(1, 2, 3))
    return (1.0 - (inter + 1.0) / (union - inter + 1.0)).mean()


# ---------------------------------------------------------------------------
# box filter and weights


def test_box_filter_matches_loop(rng):
    for B, C, H, W, k in ((1, 1, 7, 7, 3), (2, 1, 6, 9, 5), (1, 2, 5, 5, 15),
                          (1, 1, 4, 4, 1)):
        y = rng.random(size=(B, C, H, W))
        got = box_filter(y, k)
        want = np.stack([
            np.stack([box_filter_loop(y[b, c], k) for c in range(C)])
            for b in range(B)
        ])
        assert np.max(np.abs(got - want)) < 1e-12, (B, C, H, W, k)


def test_box_filter_guards():
    with pytest.raises(ShapeMismatch):
        box_filter(np.zeros((2, 2)), 3)
    with pytest.raises(ShapeMismatch):
        box_filter(np.zeros((1, 1, 4, 4)), 2)


def test_border_weights_flat_masks():
    # all-zero masks stay at weight 1; all-one masks only rise near the
    # image border, where the zero-padded box average undershoots
    y = np.ones((1, 1, 16, 16))
    w = border_weights(y, k=5)
    assert np.array_equal(border_weights(np.zeros_like(y), k=5), np.ones_like(y))
    assert np.array_equal(w[:, :, 2:-2, 2:-2], np.ones((1, 1, 12, 12)))
    assert np.all(w >= 1.0) and w[0, 0, 0, 0] > 1.0


def test_border_weights_peak_at_boundary(rng):
    y = np.zeros((1, 1, 16, 16))
    y[:, :, :, 8:] = 1.0
    w = border_weights(y, k=5)
    assert w[0, 0, 8, 8] > w[0, 0, 8, 0]
    assert w[0, 0, 8, 7] > w[0, 0, 8, 0]
    assert np.all(w >= 1.0) and np.max(w) <= 6.0


# ---------------------------------------------------------------------------
# pixel objectives


def test_weighted_bce_loop_oracle(rng):
    p = rng.normal(size=(3, 1, 6, 6)) * 3
    y = (rng.random(size=(3, 1, 6, 6)) > 0.5).astype(np.float64)
    w = 1.0 + rng.random(size=(3, 1, 6, 6))
    got = weighted_bce(Tensor(p), Tensor(y), w).data
    assert abs(got - _np_wbce(p, y, w)) < 1e-12


def test_bce_at_zero_logit_is_log_two(rng):
    p = np.zeros((2, 1, 4, 4))
    y = (rng.random(size=p.shape) > 0.5).astype(np.float64)
    got = weighted_bce(Tensor(p), Tensor(y), np.ones_like(p)).data
    assert abs(got - np.log(2.0)) < 1e-15


def test_bce_finite_at_extreme_logits():
    p = np.array([[[[-800.0, 800.0], [800.0, -800.0]]]])
    y = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
    got = weighted_bce(Tensor(p), Tensor(y), np.ones_like(p)).data
    assert np.isfinite(got)
    assert abs(got - 400.0) < 1e-9  # two of four pixels maximally wrong


def test_weighted_iou_loop_oracle(rng):
    p = rng.normal(size=(3, 1, 5, 7)) * 2
    y = (rng.random(size=p.shape) > 0.5).astype(np.float64)
    w = 1.0 + rng.random(size=p.shape)
    got = weighted_iou(Tensor(p), Tensor(y), w).data
    assert abs(got - _np_wiou(p, y, w)) < 1e-12


def test_iou_smoothing_pinned_by_degenerate_case():
    # empty target, saturated positive scores: 1 - 1/(n + 1) exposes the +1
    p = np.full((1, 1, 4, 4), 500.0)
    y = np.zeros_like(p)
    got = weighted_iou(Tensor(p), Tensor(y), np.ones_like(p)).data
    assert got == pytest.approx(1.0 - 1.0 / 17.0, abs=1e-15)


def test_dice_perfect_saturated_is_zero():
    p = np.full((2, 1, 4, 4), 500.0)
    y = np.ones_like(p)
    assert dice_loss(Tensor(p), Tensor(y)).data == 0.0


def test_dice_loop_oracle(rng):
    p = rng.normal(size=(2, 1, 6, 6)) * 2
    y = (rng.random(size=p.shape) > 0.5).astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-p))
    inter = (s * y).sum(axis=(1, 2, 3))
    total = s.sum(axis=(1, 2, 3)) + y.sum(axis=(1, 2, 3))
    want = (1.0 - (2.0 * inter + 1.0) / (total + 1.0)).mean()
    assert abs(dice_loss(Tensor(p), Tensor(y)).data - want) < 1e-12


def test_structure_loss_is_bce_plus_iou(rng):
    p = rng.normal(size=(2, 1, 8, 8))
    y = (rng.random(size=p.shape) > 0.5).astype(np.float64)
    w = border_weights(y)
    want = weighted_bce(Tensor(p), Tensor(y), w).data \
        + weighted_iou(Tensor(p), Tensor(y), w).data
    assert abs(structure_loss(Tensor(p), Tensor(y)).data - want) < 1e-15


def test_shape_guards(rng):
    with pytest.raises(ShapeMismatch):
        weighted_bce(Tensor(np.zeros((1, 1, 4, 4))),
                     Tensor(np.zeros((1, 1, 4, 5))), np.ones((1, 1, 4, 4)))
    with pytest.raises(ShapeMismatch):
        dice_loss(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))))


# ---------------------------------------------------------------------------
# level aggregation


def test_level_target_downsamples_nearest(rng):
    gt = (rng.random(size=(2, 1, 8, 8)) > 0.5).astype(np.float64)
    small = level_target(Tensor(gt), (4, 4))
    want = T.interpolate(Tensor(gt), (4, 4), mode="nearest").data
    assert np.array_equal(small.data, want)
    assert set(np.unique(small.data)) <= {0.0, 1.0}
    same = level_target(Tensor(gt), (8, 8))
    assert np.array_equal(same.data, gt)


def test_total_loss_wiring_and_level_weights(rng):
    sizes = [16, 8, 4, 2, 2]
    masks = [Tensor(rng.normal(size=(2, 1, s, s))) for s in sizes]
    edges = [Tensor(rng.normal(size=(2, 1, s, s))) for s in sizes[:4]]
    out = SegmentationOutput(masks, edges)
    mask_gt = (rng.random(size=(2, 1, 32, 32)) > 0.5).astype(np.float64)
    edge_gt = (rng.random(size=(2, 1, 32, 32)) > 0.8).astype(np.float64)
    got = total_seg_loss(out, Tensor(mask_gt), Tensor(edge_gt)).data

    want = 0.0
    for k, m in enumerate(masks):
        g = level_target(Tensor(mask_gt), (sizes[k], sizes[k]))
        want += (0.5 ** k) * structure_loss(m, g).data
    for k, e in enumerate(edges):
        g = level_target(Tensor(edge_gt), (sizes[k], sizes[k]))
        want += (0.5 ** k) * dice_loss(e, g).data
    assert abs(got - want) < 1e-12


def test_total_loss_gradient_reaches_network(rng):
    net = BFSer(rng, widths=(2, 3, 4, 5, 6), d_model=4, d_inner=8, n_state=2,
                knowledge_channels=8)
    x_i = Tensor(rng.normal(size=(1, 3, 32, 32)))
    x_u = Tensor(rng.normal(size=(1, 1, 32, 32)))
    gt = (rng.random(size=(1, 1, 32, 32)) > 0.5).astype(np.float64)
    edge = (rng.random(size=(1, 1, 32, 32)) > 0.8).astype(np.float64)
    loss = total_seg_loss(net(x_i, x_u), Tensor(gt), Tensor(edge))
    T.backward(loss)
    touched = sum(1 for _, p in net.named_parameters() if p.grad is not None)
    assert touched > 0.8 * sum(1 for _ in net.named_parameters())


def test_structure_loss_gradcheck(rng):
    p = Tensor(rng.normal(size=(1, 1, 6, 6)), requires_grad=True)
    y = Tensor((rng.random(size=(1, 1, 6, 6)) > 0.5).astype(np.float64))
    rep = T.grad_check(lambda *ts: structure_loss(ts[0], y), [p], sample=12)
    assert rep.passed, rep


def test_dice_gradcheck(rng):
    p = Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
    y = Tensor((rng.random(size=(1, 1, 5, 5)) > 0.5).astype(np.float64))
    rep = T.grad_check(lambda *ts: dice_loss(ts[0], y), [p], sample=10)
    assert rep.passed, rep
