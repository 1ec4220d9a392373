"""Scan blocks: intra-modal residual scan and the cross-modal variant.

The cross block scans one stream (the fused features) while deriving the
per-step selection coefficients from the other stream (the modality
features), so the modality decides what the fused sequence remembers.
"""

from __future__ import annotations

import math

import numpy as np

from . import scan2d, ssm
from . import tensor as T
from .errors import InvalidReduction
from .nn import Conv2d, LayerNormChannels, Linear, Module, uniform_init
from .scan2d import ALL_DIRECTIONS
from .tensor import Tensor


class ChannelAttention(Module):
    """Squeeze-and-excitation: pool, bottleneck MLP, sigmoid rescale."""

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        if channels % reduction != 0:
            raise InvalidReduction(
                f"channels {channels} not divisible by reduction {reduction}")
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x):
        pooled = x.mean(axis=(2, 3))  # (B, C)
        s = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        b, c = s.shape
        return x * T.reshape(s, (b, c, 1, 1))


class SelectiveProjections(Module):
    """Per-step coefficient maps for a selective scan over d channels.

    delta uses a rank-reduced projection d -> ceil(d/16) -> d; its bias is
    initialized so softplus lands log-uniform in [1e-3, 1e-1].
    """

    def __init__(self, d, n, rng):
        super().__init__()
        rank = max(math.ceil(d / 16), 1)
        self.w_b = uniform_init(rng, (d, n), d)
        self.w_c = uniform_init(rng, (d, n), d)
        self.w_dt_down = uniform_init(rng, (d, rank), d)
        self.w_dt_up = uniform_init(rng, (rank, d), rank)
        self.dt_bias = Tensor(ssm.delta_bias_init(rng, d), requires_grad=True)

    def forward(self, seq):
        b_sel = T.affine_lastdim(seq, self.w_b)
        c_sel = T.affine_lastdim(seq, self.w_c)
        low = T.affine_lastdim(seq, self.w_dt_down)
        delta = T.softplus(T.affine_lastdim(low, self.w_dt_up, self.dt_bias))
        return delta, b_sel, c_sel


class ResidualScanBlock(Module):
    """LN -> widen/split -> depthwise conv -> four-direction selective scan
    -> gate -> narrow -> residual add. Self-derived selection coefficients.
    """

    def __init__(self, d_model, d_inner, n_state, rng, d_conv=3,
                 discretization="taylor", scan_mode="sequential",
                 per_direction_params=False):
        super().__init__()
        self.d_inner = d_inner
        self.norm = LayerNormChannels(d_model)
        self.in_proj = Conv2d(d_model, 2 * d_inner, 1, rng)
        self.dw_conv = Conv2d(d_inner, d_inner, d_conv, rng, padding=d_conv // 2,
                              groups=d_inner)
        n_sets = len(ALL_DIRECTIONS) if per_direction_params else 1
        self.sel = [SelectiveProjections(d_inner, n_state, rng) for _ in range(n_sets)]
        self.a_log = [
            Tensor(np.log(-ssm.s4d_real_init(d_inner, n_state)), requires_grad=True)
            for _ in range(n_sets)
        ]
        self.norm_y = LayerNormChannels(d_inner)
        self.out_proj = Conv2d(d_inner, d_model, 1, rng)
        self.discretization = discretization
        self.scan_mode = scan_mode
        self.per_direction = per_direction_params

    def _neg_a(self, i):
        # parameterized as log(-A) so A stays on the stable half-line
        return T.neg(T.exp(self.a_log[i]))

    def _scan_fn(self, i):
        def scan(seq):
            delta, b_sel, c_sel = self.sel[i](seq)
            return ssm.selective_scan(seq, delta, b_sel, c_sel, self._neg_a(i),
                                      discretization=self.discretization,
                                      mode=self.scan_mode)

        return scan

    def _directional_scan(self, f):
        if not self.per_direction:
            return scan2d.multi_direction_ssm(f, self._scan_fn(0))
        b, c, h, w = f.shape
        acc = None
        for i, d in enumerate(ALL_DIRECTIONS):
            seq = scan2d.flatten_scan(f, d)
            m = scan2d.unflatten_scan(self._scan_fn(i)(seq), d, h, w)
            acc = m if acc is None else T.add(acc, m)
        return acc * (1.0 / len(ALL_DIRECTIONS))

    def forward(self, x):
        t = self.norm(x)
        fz = self.in_proj(t)
        f, z = T.split_channels(fz, self.d_inner)
        f = T.silu(self.dw_conv(f))
        y = self._directional_scan(f)
        y = self.norm_y(y) * T.silu(z)
        return x + self.out_proj(y)


class CrossScanBlock(Module):
    """Cross-selective scan fusing a modality stream into the shared stream.

    Both inputs pass one shared widen/split projection; each gets its own
    depthwise conv. The scan runs over the shared stream's sequence while
    delta/B/C come from the modality stream, then both gates multiply in,
    and a channel-attended conv with two scaled residuals closes the block.
    """

    def __init__(self, d_model, d_inner, n_state, rng, d_conv=3,
                 discretization="taylor", scan_mode="sequential",
                 per_direction_params=False):
        super().__init__()
        self.d_inner = d_inner
        self.in_proj = Conv2d(d_model, 2 * d_inner, 1, rng)
        self.dw_conv_n = Conv2d(d_inner, d_inner, d_conv, rng, padding=d_conv // 2,
                                groups=d_inner)
        self.dw_conv_x = Conv2d(d_inner, d_inner, d_conv, rng, padding=d_conv // 2,
                                groups=d_inner)
        n_sets = len(ALL_DIRECTIONS) if per_direction_params else 1
        self.sel = [SelectiveProjections(d_inner, n_state, rng) for _ in range(n_sets)]
        self.a_log = [
            Tensor(np.log(-ssm.s4d_real_init(d_inner, n_state)), requires_grad=True)
            for _ in range(n_sets)
        ]
        self.norm_y = LayerNormChannels(d_inner)
        self.out_proj = Conv2d(d_inner, d_model, 1, rng)
        self.norm_out = LayerNormChannels(d_model)
        self.conv_out = Conv2d(d_model, d_model, 3, rng, padding=1)
        self.ca = ChannelAttention(d_model, rng)
        self.scale_in = Tensor(np.ones(d_model), requires_grad=True)
        self.scale_out = Tensor(np.ones(d_model), requires_grad=True)
        self.discretization = discretization
        self.scan_mode = scan_mode
        self.per_direction = per_direction_params

    def _neg_a(self, i):
        return T.neg(T.exp(self.a_log[i]))

    def _cross_scan(self, h_n, h_x):
        b, c, hh, ww = h_x.shape
        dirs = ALL_DIRECTIONS
        if not self.per_direction:
            seq_n = T.concat([scan2d.flatten_scan(h_n, d) for d in dirs], axis=0)
            seq_x = T.concat([scan2d.flatten_scan(h_x, d) for d in dirs], axis=0)
            delta, b_sel, c_sel = self.sel[0](seq_n)
            out = ssm.selective_scan(seq_x, delta, b_sel, c_sel, self._neg_a(0),
                                     discretization=self.discretization,
                                     mode=self.scan_mode)
            acc = None
            for i, d in enumerate(dirs):
                part = scan2d.unflatten_scan(T.narrow(out, 0, i * b, b), d, hh, ww)
                acc = part if acc is None else T.add(acc, part)
            return acc * (1.0 / len(dirs))
        acc = None
        for i, d in enumerate(dirs):
            sn = scan2d.flatten_scan(h_n, d)
            sx = scan2d.flatten_scan(h_x, d)
            delta, b_sel, c_sel = self.sel[i](sn)
            y = ssm.selective_scan(sx, delta, b_sel, c_sel, self._neg_a(i),
                                   discretization=self.discretization,
                                   mode=self.scan_mode)
            part = scan2d.unflatten_scan(y, d, hh, ww)
            acc = part if acc is None else T.add(acc, part)
        return acc * (1.0 / len(dirs))

    def forward(self, f_n, f_x):
        pn = self.in_proj(f_n)
        px = self.in_proj(f_x)
        fn_in, z_n = T.split_channels(pn, self.d_inner)
        fx_in, z_x = T.split_channels(px, self.d_inner)
        h_n = T.silu(self.dw_conv_n(fn_in))
        h_x = T.silu(self.dw_conv_x(fx_in))
        y = self._cross_scan(h_n, h_x)
        y = self.norm_y(y) * T.silu(z_n) * T.silu(z_x)
        y = self.out_proj(y)
        s = T.reshape(self.scale_in, (1, -1, 1, 1))
        s2 = T.reshape(self.scale_out, (1, -1, 1, 1))
        t = self.norm_out(y + f_n * s)
        return self.ca(self.conv_out(t)) + f_n * s2
