"""Metric tests: exact values on degenerate cases, hand-counted small maps."""

import numpy as np
import pytest

from multicos.errors import DomainError, ShapeMismatch
from multicos.metrics import e_measure, evaluate_all, f_beta, mae, s_measure


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


@pytest.fixture
def gt64():
    return _disk(64, 64, 30, 34, 12)[None, None]


# ---------------------------------------------------------------------------
# mean absolute error


def test_mae_perfect_is_exactly_zero(gt64):
    assert mae(gt64, gt64) == 0.0


def test_mae_inverted_is_exactly_one(gt64):
    assert mae(1.0 - gt64, gt64) == 1.0


def test_mae_constant_offset():
    gt = np.zeros((1, 1, 8, 8))
    assert mae(np.full_like(gt, 0.25), gt) == 0.25


def test_mae_rank2_promotion(gt64):
    assert mae(gt64[0, 0], gt64[0, 0]) == 0.0


def test_metric_shape_guard(gt64):
    with pytest.raises(ShapeMismatch):
        mae(gt64, gt64[:, :, :32, :])
    with pytest.raises(ShapeMismatch):
        mae(np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 8, 8)))


# ---------------------------------------------------------------------------
# F measure


def test_f_perfect_is_exactly_one(gt64):
    f_max, f_mean, f_adp = f_beta(gt64, gt64)
    assert f_max == 1.0 and f_mean == 1.0 and f_adp == 1.0


def test_f_inverted_is_exactly_zero(gt64):
    f_max, f_mean, f_adp = f_beta(1.0 - gt64, gt64)
    assert f_max == 0.0 and f_mean == 0.0 and f_adp == 0.0


def test_f_empty_gt_empty_pred_counts_as_match():
    z = np.zeros((1, 1, 8, 8))
    f_max, f_mean, f_adp = f_beta(z, z)
    assert f_max == 1.0 and f_mean == 1.0 and f_adp == 1.0


def test_f_empty_gt_full_pred_is_zero():
    z = np.zeros((1, 1, 8, 8))
    f_max, f_mean, f_adp = f_beta(np.ones_like(z), z)
    assert f_max == 0.0 and f_mean == 0.0 and f_adp == 0.0


def test_f_sweep_hand_case():
    # best threshold band separates the two positives exactly
    pred = np.array([[[[0.8, 0.6], [0.2, 0.1]]]])
    gt = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
    f_max, f_mean, f_adp = f_beta(pred, gt)
    assert f_max == 1.0
    assert 0.0 < f_mean < 1.0
    # adaptive cut = 2 * mean = 0.85 keeps no pixel, so recall collapses
    assert f_adp == 0.0


def test_f_adaptive_threshold_rule():
    pred = np.zeros((1, 1, 4, 4))
    pred[0, 0, :2] = 0.3  # mean 0.15, adaptive cut 0.3 keeps the top half
    gt = np.zeros_like(pred)
    gt[0, 0, :2] = 1.0
    _, _, f_adp = f_beta(pred, gt)
    assert f_adp == 1.0


# ---------------------------------------------------------------------------
# E measure


def test_e_perfect_is_exactly_one(gt64):
    for kind in ("adaptive", "max", "mean"):
        assert e_measure(gt64, gt64, kind) == 1.0


def test_e_inverted_is_exactly_zero(gt64):
    for kind in ("adaptive", "max", "mean"):
        assert e_measure(1.0 - gt64, gt64, kind) == 0.0


def test_e_both_empty_is_one():
    z = np.zeros((1, 1, 8, 8))
    assert e_measure(z, z) == 1.0


def test_e_empty_gt_penalizes_coverage():
    z = np.zeros((1, 1, 8, 8))
    p = np.zeros_like(z)
    p[0, 0, :4] = 1.0
    assert e_measure(p, z) == 0.5


def test_e_between_zero_and_one_generic(gt64):
    # a shifted disk binarizes to a partial overlap, not a perfect match
    shifted = _disk(64, 64, 24, 26, 12)[None, None] * 0.9
    val = e_measure(shifted, gt64)
    assert 0.0 < val < 1.0
    assert e_measure(shifted, gt64, "max") >= e_measure(shifted, gt64, "mean")
    with pytest.raises(DomainError):
        e_measure(shifted, gt64, "median")


def test_e_sweep_matches_threshold_loop(gt64, rng):
    # brute force: binarize at each cut and score the alignment map directly
    pred = np.clip(gt64 + 0.4 * rng.random(gt64.shape) - 0.2, 0.0, 1.0)
    p2, g = pred[0, 0], gt64[0, 0] > 0.5
    gf = g.astype(np.float64)
    vals = []
    for i in range(256):
        p = (p2 >= (i + 0.5) / 256.0).astype(np.float64)
        fp, fg = p - p.mean(), gf - gf.mean()
        den = fp * fp + fg * fg
        align = np.where(den > 0, 2.0 * fp * fg / np.where(den > 0, den, 1.0), 1.0)
        vals.append(((align + 1.0) ** 2 / 4.0).mean())
    assert abs(e_measure(pred, gt64, "max") - max(vals)) < 1e-12
    assert abs(e_measure(pred, gt64, "mean") - np.mean(vals)) < 1e-12


# ---------------------------------------------------------------------------
# S measure


def test_s_perfect_is_exactly_one(gt64):
    assert s_measure(gt64, gt64) == 1.0


def test_s_empty_gt_cases():
    z = np.zeros((1, 1, 8, 8))
    assert s_measure(z, z) == 1.0
    assert s_measure(np.ones_like(z), z) == 0.0
    assert s_measure(np.full_like(z, 0.25), z) == 0.75


def test_s_full_gt_is_mean_prediction():
    o = np.ones((1, 1, 8, 8))
    assert s_measure(np.full_like(o, 0.6), o) == pytest.approx(0.6, abs=1e-15)


def test_s_orders_degradations(rng, gt64):
    noisy = np.clip(gt64 * 0.8 + 0.1, 0, 1)
    perfect = s_measure(gt64, gt64)
    mid = s_measure(noisy, gt64)
    bad = s_measure(1.0 - gt64, gt64)
    assert perfect > mid > bad


# ---------------------------------------------------------------------------
# bundle


def test_evaluate_all_keys_and_perfect_values(gt64):
    out = evaluate_all(gt64, gt64)
    assert set(out) == {"mae", "f_max", "f_mean", "f_adaptive",
                        "e_max", "e_mean", "e_adaptive", "s_measure"}
    assert out["mae"] == 0.0
    assert out["f_max"] == out["f_mean"] == out["f_adaptive"] == 1.0
    assert out["e_max"] == out["e_mean"] == out["e_adaptive"] == 1.0
    assert out["s_measure"] == 1.0


def test_batch_averaging(gt64):
    pred = np.concatenate([gt64, 1.0 - gt64], axis=0)
    gt = np.concatenate([gt64, gt64], axis=0)
    assert mae(pred, gt) == pytest.approx(0.5, abs=1e-15)
