"""Evaluation measures for soft masks against binary ground truth.

All functions take prediction maps in [0, 1] and {0, 1} ground truth of
shape (B, 1, H, W) (or (H, W), which is promoted). Plain numpy, no tape.
Degenerate 0/0 ratios resolve in favor of the empty-vs-empty match, so a
perfect prediction scores exactly 1 (or exactly 0 error).
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeMismatch

_BETA2 = 0.3


def _promote(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    if a.ndim != 4 or a.shape[1] != 1:
        raise ShapeMismatch(f"metrics expect (B, 1, H, W) maps, got {a.shape}")
    return a


def _pair(pred, gt):
    pred, gt = _promote(pred), _promote(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def mae(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _fscore(tp, pp, gp, beta2):
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 1.0)
    recall = np.where(gp > 0, tp / np.maximum(gp, 1), 1.0)
    den = beta2 * precision + recall
    return np.where(den > 0, (1.0 + beta2) * precision * recall / np.where(den > 0, den, 1.0), 0.0)


def f_beta(pred, gt, beta2=_BETA2):
    """Threshold-swept F measure.

    Returns (f_max, f_mean, f_adaptive): the sweep uses the 256 midpoint
    thresholds (i + 0.5)/256; adaptive binarizes each image at twice its
    own mean score (capped at 1).
    """
    pred, gt = _pair(pred, gt)
    B = pred.shape[0]
    p2 = pred.reshape(B, -1)
    g2 = gt.reshape(B, -1) > 0.5
    gp = g2.sum(axis=1)

    thr = (np.arange(256) + 0.5) / 256.0
    bp = p2[None, :, :] >= thr[:, None, None]  # (256, B, P)
    tp = (bp & g2[None]).sum(axis=2)
    pp = bp.sum(axis=2)
    curve = _fscore(tp, pp, gp[None], beta2).mean(axis=1)  # (256,)

    ta = np.minimum(2.0 * p2.mean(axis=1), 1.0)
    # a zero cut must not promote an all-zero map to an all-ones mask
    ba = np.where(ta[:, None] > 0, p2 >= ta[:, None], p2 > 0)
    tpa = (ba & g2).sum(axis=1)
    f_adp = _fscore(tpa, ba.sum(axis=1), gp, beta2).mean()
    return float(curve.max()), float(curve.mean()), float(f_adp)


def _enhanced_mean(p, g):
    """Mean enhanced-alignment over one binary prediction map."""
    if not g.any():
        return 1.0 - p.mean()
    if g.all():
        return p.mean()
    gf = g.astype(np.float64)
    fp = p - p.mean()
    fg = gf - gf.mean()
    den = fp * fp + fg * fg
    align = np.where(den > 0, 2.0 * fp * fg / np.where(den > 0, den, 1.0), 1.0)
    return float(((align + 1.0) ** 2 / 4.0).mean())


def _e_curve(p1, g1):
    """Enhancement score at each sweep threshold for one flattened image.

    With binary maps the alignment takes one value per confusion cell, so
    the whole curve follows from tp/pp counts; the centered gt term is
    nonzero everywhere once gt is non-constant, hence no zero guards.
    """
    n = p1.size
    thr = (np.arange(256) + 0.5) / 256.0
    bp = p1[None, :] >= thr[:, None]
    pp = bp.sum(axis=1)
    mu_p = pp / n
    if not g1.any():
        return 1.0 - mu_p
    if g1.all():
        return mu_p
    tp = (bp & g1[None, :]).sum(axis=1)
    gp = int(g1.sum())
    mu_g = gp / n
    a1, a0 = 1.0 - mu_p, -mu_p
    b1, b0 = 1.0 - mu_g, -mu_g

    def cell(a, b):
        return (2.0 * a * b / (a * a + b * b) + 1.0) ** 2 / 4.0

    return (tp * cell(a1, b1) + (pp - tp) * cell(a1, b0)
            + (gp - tp) * cell(a0, b1)
            + (n - pp - gp + tp) * cell(a0, b0)) / n


def e_measure(pred, gt, kind="adaptive"):
    """Alignment-based enhancement score.

    kind "adaptive" binarizes at min(2 mean, 1); "max"/"mean" reduce the
    256-threshold sweep.
    """
    if kind not in ("adaptive", "max", "mean"):
        raise DomainError(f"unknown e-measure kind {kind!r}")
    pred, gt = _pair(pred, gt)
    scores = np.empty(pred.shape[0])
    for i in range(pred.shape[0]):
        p2 = pred[i, 0]
        g = gt[i, 0] > 0.5
        if kind == "adaptive":
            t = min(2.0 * p2.mean(), 1.0)
            p = (p2 >= t if t > 0 else p2 > 0).astype(np.float64)
            scores[i] = _enhanced_mean(p, g)
        else:
            curve = _e_curve(p2.ravel(), g.ravel())
            scores[i] = curve.max() if kind == "max" else curve.mean()
    return float(scores.mean())


def _object_score(vals):
    if vals.size == 0:
        return 0.0
    x = vals.mean()
    sigma = vals.std()
    return 2.0 * x / (x * x + 1.0 + sigma)


def _ssim_region(p, g):
    n = p.size
    if n == 0:
        return 1.0
    xm, ym = p.mean(), g.mean()
    if n == 1:
        sx2 = sy2 = sxy = 0.0
    else:
        sx2 = ((p - xm) ** 2).sum() / (n - 1)
        sy2 = ((g - ym) ** 2).sum() / (n - 1)
        sxy = ((p - xm) * (g - ym)).sum() / (n - 1)
    num = 4.0 * xm * ym * sxy
    den = (xm * xm + ym * ym) * (sx2 + sy2)
    if den > 0:
        return num / den
    return 1.0 if num == 0 else 0.0


def _s_one(p2, g):
    gf = g.astype(np.float64)
    y = gf.mean()
    if y == 0.0:
        return 1.0 - p2.mean()
    if y == 1.0:
        return float(p2.mean())
    # object part: foreground on the scores, background on their complement
    s_obj = y * _object_score(p2[g]) + (1.0 - y) * _object_score(1.0 - p2[~g])
    # region part: quadrants around the foreground centroid
    rows, cols = np.nonzero(g)
    cy = int(np.round(rows.mean()))
    cx = int(np.round(cols.mean()))
    H, W = g.shape
    total = float(H * W)
    s_reg = 0.0
    for rs, cs in ((slice(0, cy + 1), slice(0, cx + 1)),
                   (slice(0, cy + 1), slice(cx + 1, W)),
                   (slice(cy + 1, H), slice(0, cx + 1)),
                   (slice(cy + 1, H), slice(cx + 1, W))):
        pq, gq = p2[rs, cs], gf[rs, cs]
        s_reg += (pq.size / total) * _ssim_region(pq.ravel(), gq.ravel())
    return 0.5 * s_obj + 0.5 * s_reg


def s_measure(pred, gt):
    """Structure similarity: equal parts object score and quadrant score."""
    pred, gt = _pair(pred, gt)
    vals = [max(_s_one(pred[i, 0], gt[i, 0] > 0.5), 0.0)
            for i in range(pred.shape[0])]
    return float(np.mean(vals))


def evaluate_all(pred, gt):
    """One dict with every measure; f and e use the sweep plus adaptive cuts."""
    f_max, f_mean, f_adp = f_beta(pred, gt)
    return {
        "mae": mae(pred, gt),
        "f_max": f_max,
        "f_mean": f_mean,
        "f_adaptive": f_adp,
        "e_max": e_measure(pred, gt, "max"),
        "e_mean": e_measure(pred, gt, "mean"),
        "e_adaptive": e_measure(pred, gt, "adaptive"),
        "s_measure": s_measure(pred, gt),
    }
