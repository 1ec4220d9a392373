"""Per-level fusion blocks joining the two encoder streams.

Three fusions with different jobs: LatentFusion folds auxiliary features into
the image stream, GatedRefinement feeds fused context back into the auxiliary
stream, and ScanFusion runs both streams through cross-selective scans and
merges them under a learned gate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cssm import CrossScanBlock, ResidualScanBlock
from .errors import ShapeMismatch
from .nn import Conv2d, ConvBlock, Module
from .tensor import Tensor


class LatentFusion(Module):
    """f_x = f_i * sigmoid(w_gate(C(f_u))) + w_add(C(f_u)), each branch with
    its own conv block."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.cb_gate = ConvBlock(c_in, c_out, 3, rng)
        self.w_gate = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.cb_add = ConvBlock(c_in, c_out, 3, rng)
        self.w_add = Conv2d(c_out, c_out, 3, rng, padding=1)

    def forward(self, f_i, f_u):
        if f_i.shape != f_u.shape:
            raise ShapeMismatch(f"latent fusion inputs {f_i.shape} vs {f_u.shape}")
        gate = T.sigmoid(self.w_gate(self.cb_gate(f_u)))
        return f_i * gate + self.w_add(self.cb_add(f_u))

    def additive(self, f_u):
        """Ablation path: only the additive projection, no image gating."""
        return self.w_add(self.cb_add(f_u))


class GatedRefinement(Module):
    """alpha = sigmoid(w_cat concat[f_u, C1(f_x)]);
    out = C2(f_u * alpha * w_mod(C1(f_x)) + f_u). C1(f_x) is computed once."""

    def __init__(self, c_u, c_x, rng):
        super().__init__()
        self.cb1 = ConvBlock(c_x, c_u, 3, rng)
        self.w_cat = Conv2d(2 * c_u, c_u, 3, rng, padding=1)
        self.w_mod = Conv2d(c_u, c_u, 3, rng, padding=1)
        self.cb2 = ConvBlock(c_u, c_u, 3, rng)

    def forward(self, f_u, f_x):
        if f_u.shape[2:] != f_x.shape[2:] or f_u.shape[0] != f_x.shape[0]:
            raise ShapeMismatch(f"refinement inputs {f_u.shape} vs {f_x.shape}")
        t = self.cb1(f_x)
        alpha = T.sigmoid(self.w_cat(T.concat_channels(f_u, t)))
        return self.cb2(f_u * alpha * self.w_mod(t) + f_u)


class WeightedGate(Module):
    """Two passes of a shared 1x1 conv + LReLU produce intermediate signals;
    their concat projects to a sigmoid gate (per pixel, or per channel when
    asked), strictly inside (0, 1).
    """

    def __init__(self, channels, rng, per_channel=False):
        super().__init__()
        self.theta = Conv2d(channels, channels, 1, rng)
        out_ch = channels if per_channel else 1
        self.proj = Conv2d(2 * channels, out_ch, 1, rng, bias=False)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, x):
        d1 = T.leaky_relu(self.theta(x), 0.01)
        d2 = T.leaky_relu(self.theta(x + d1), 0.01)
        raw = self.proj(T.concat_channels(d1, d2))
        return T.sigmoid(raw + T.reshape(self.bias, (1, 1, 1, 1)))


class ScanFusion(Module):
    """Project both streams to the model width, contextualize each (and their
    concat) with residual scan blocks, cross-scan each modality against the
    fused stream, and merge under the learned gate.

    The ablation switches fall back to cheaper paths: no scan blocks leaves
    the plain projections, no cross blocks passes the contextualized streams
    through, no gate merges at a constant 0.5.
    """

    def __init__(self, c_i, c_u, c_out, d_model, d_inner, n_state, rng,
                 d_conv=3, discretization="taylor", scan_mode="sequential",
                 per_direction_params=False, use_scan_blocks=True,
                 use_cross=True, use_gate=True, per_channel_gate=False):
        super().__init__()
        scan_kw = dict(d_conv=d_conv, discretization=discretization,
                       scan_mode=scan_mode,
                       per_direction_params=per_direction_params)
        self.proj_i = Conv2d(c_i, d_model, 1, rng)
        self.proj_u = Conv2d(c_u, d_model, 1, rng)
        self.cb_cat = ConvBlock(c_i + c_u, d_model, 3, rng)
        self.use_scan_blocks = use_scan_blocks
        self.use_cross = use_cross
        self.use_gate = use_gate
        # always constructed so the checkpoint manifest is flag-independent
        self.scan_i = ResidualScanBlock(d_model, d_inner, n_state, rng, **scan_kw)
        self.scan_u = ResidualScanBlock(d_model, d_inner, n_state, rng, **scan_kw)
        self.scan_x = ResidualScanBlock(d_model, d_inner, n_state, rng, **scan_kw)
        self.cross_i = CrossScanBlock(d_model, d_inner, n_state, rng, **scan_kw)
        self.cross_u = CrossScanBlock(d_model, d_inner, n_state, rng, **scan_kw)
        self.gate = WeightedGate(d_model, rng, per_channel=per_channel_gate)
        self.cb_merge_i = ConvBlock(d_model, d_model, 3, rng)
        self.cb_merge_u = ConvBlock(d_model, d_model, 3, rng)
        self.cb_out = ConvBlock(d_model, c_out, 3, rng)

    def forward(self, f_i, f_u):
        if f_i.shape[2:] != f_u.shape[2:] or f_i.shape[0] != f_u.shape[0]:
            raise ShapeMismatch(f"scan fusion inputs {f_i.shape} vs {f_u.shape}")
        t_i = self.proj_i(f_i)
        t_u = self.proj_u(f_u)
        t_x = self.cb_cat(T.concat_channels(f_i, f_u))
        if self.use_scan_blocks:
            t_i = self.scan_i(t_i)
            t_u = self.scan_u(t_u)
            t_x = self.scan_x(t_x)
        big_i = self.cross_i(t_i, t_x) if self.use_cross else t_i
        big_u = self.cross_u(t_u, t_x) if self.use_cross else t_u
        g = self.gate(t_x) if self.use_gate else 0.5
        merged_i = self.cb_merge_i(big_i * g + t_x)
        merged_u = self.cb_merge_u(big_u * (1.0 - g) + t_x)
        return self.cb_out(merged_i + merged_u)
