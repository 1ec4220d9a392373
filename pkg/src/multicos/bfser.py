"""Dual-encoder segmentation network.

Two strided conv encoders run side by side: the image stream runs straight,
while the auxiliary stream is refined level by level with feedback from the
fused features. Fused skip connections pass through scan fusion, the deepest
fused map goes through a dilated-pyramid head into a coarse mask, and a
top-down decoder emits mask and edge logits per level.

Five encoder levels at H/2 .. H/32; fusion happens on the first four. The
coarse mask lives at the fourth level's resolution and the decoder's first
step is therefore a same-resolution concat before the upsampling chain.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import MissingModality, ShapeMismatch
from .fusion import GatedRefinement, LatentFusion, ScanFusion
from .nn import Conv2d, ConvBlock, Module
from .tensor import Tensor

TOY_WIDTHS = (16, 24, 32, 48, 64)


class EncoderStage(Module):
    """Stride-2 conv block then stride-1 conv block: halves H and W."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.down = ConvBlock(c_in, c_out, 3, rng, stride=2)
        self.keep = ConvBlock(c_out, c_out, 3, rng)

    def forward(self, x):
        return self.keep(self.down(x))


class Encoder(Module):
    """Five-stage strided conv stack; optional full-resolution embedding."""

    def __init__(self, c_in, widths, rng, embed=False):
        super().__init__()
        self.embed = ConvBlock(c_in, widths[0], 3, rng) if embed else None
        chans = [widths[0] if embed else c_in] + list(widths)
        self.stages = [EncoderStage(chans[k], chans[k + 1], rng)
                       for k in range(len(widths))]

    def stem(self, x):
        return self.embed(x) if self.embed is not None else x

    def forward(self, x):
        feats = []
        t = self.stem(x)
        for stage in self.stages:
            t = stage(t)
            feats.append(t)
        return feats


class DilatedPyramid(Module):
    """Parallel dilated conv branches plus a pooled branch, fused 1x1, and a
    single-channel coarse head. Edge-replicate padding keeps constants
    constant on the tiny deep maps."""

    def __init__(self, channels, rng, rates=(1, 2, 4)):
        super().__init__()
        self.branches = [ConvBlock(channels, channels, 3, rng, dilation=r,
                                   pad_mode="edge") for r in rates]
        # pooled branch skips BN: batch statistics degenerate on a 1x1 map
        self.pool_conv = Conv2d(channels, channels, 1, rng)
        self.fuse = Conv2d((len(rates) + 1) * channels, channels, 1, rng)
        self.head = Conv2d(channels, 1, 1, rng)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        parts = [b(x) for b in self.branches]
        pooled = T.leaky_relu(self.pool_conv(x.mean(axis=(2, 3), keepdims=True)), 0.01)
        parts.append(T.interpolate(pooled, (h, w), mode="nearest"))
        cat = parts[0]
        for p in parts[1:]:
            cat = T.concat_channels(cat, p)
        return self.head(T.leaky_relu(self.fuse(cat), 0.01))


class TopDownDecoder(Module):
    """Minimal replaceable decoder: takes the coarse logits and four fused
    skips, emits mask and edge logits at each skip resolution."""

    def __init__(self, widths, rng):
        super().__init__()
        w = list(widths)
        in_ch = [1 + w[3], w[3] + w[2], w[2] + w[1], w[1] + w[0]]
        out_ch = [w[3], w[2], w[1], w[0]]
        self.blocks = [ConvBlock(ci, co, 3, rng) for ci, co in zip(in_ch, out_ch)]
        self.mask_heads = [Conv2d(c, 1, 1, rng) for c in out_ch]
        self.edge_heads = [Conv2d(c, 1, 1, rng) for c in out_ch]

    def forward(self, coarse, skips):
        if len(skips) != 4:
            raise ShapeMismatch(f"expected 4 skips, got {len(skips)}")
        # level order 1..4 means strictly increasing resolution as consumed
        sizes = [s.shape[2] for s in skips]
        if sorted(sizes, reverse=True) != sizes or len(set(sizes)) != len(sizes):
            raise ShapeMismatch(f"skip resolutions must be strictly ordered: {sizes}")
        state = coarse
        masks, edges = [], []
        for j in range(4):
            skip = skips[3 - j]
            state = T.interpolate(state, (skip.shape[2], skip.shape[3]),
                                  mode="bilinear")
            state = self.blocks[j](T.concat_channels(state, skip))
            masks.append(self.mask_heads[j](state))
            edges.append(self.edge_heads[j](state))
        return masks[::-1], edges[::-1]  # reorder to level 1..4


class SegmentationOutput:
    """masks: logits at levels 1..5 (index k-1); edges: logits at levels 1..4."""

    def __init__(self, masks, edges):
        if len(masks) != 5 or len(edges) != 4:
            raise ShapeMismatch(
                f"expected 5 masks and 4 edges, got {len(masks)}/{len(edges)}")
        self.masks = masks
        self.edges = edges


class BFSer(Module):
    """The full dual-stream segmentor.

    Mode and ablation switches only change routing; every submodule is always
    constructed, so one checkpoint covers every configuration.
    """

    def __init__(self, rng, in_ch_i=3, in_ch_u=1, widths=TOY_WIDTHS,
                 d_model=24, d_inner=48, n_state=4, d_conv=3,
                 discretization="taylor", scan_mode="sequential",
                 per_direction_params=False, per_channel_gate=False,
                 rgb_only=False, enable_lsfm=True, enable_ffm=True,
                 enable_ssfm=True, enable_cssm=True, enable_gate=True,
                 enable_scan_blocks=True, embed_u=True, knowledge_channels=64):
        super().__init__()
        self.widths = tuple(widths)
        self.rgb_only = rgb_only
        self.enable_lsfm = enable_lsfm
        self.enable_ffm = enable_ffm
        self.enable_ssfm = enable_ssfm
        self.enc_i = Encoder(in_ch_i, widths, rng, embed=False)
        self.enc_u = Encoder(in_ch_u, widths, rng, embed=embed_u)
        w = list(widths)
        self.lat_fuse = [LatentFusion(w[k], w[k], rng) for k in range(4)]
        self.feedback = [GatedRefinement(w[k], w[k], rng) for k in range(3)]
        ssfm_kw = dict(d_conv=d_conv, discretization=discretization,
                       scan_mode=scan_mode,
                       per_direction_params=per_direction_params,
                       use_scan_blocks=enable_scan_blocks,
                       use_cross=enable_cssm, use_gate=enable_gate,
                       per_channel_gate=per_channel_gate)
        self.scan_fuse = [
            ScanFusion(w[k], w[k], w[k], d_model, d_inner, n_state, rng, **ssfm_kw)
            for k in range(4)
        ]
        self.cat_fallback = [ConvBlock(2 * w[k], w[k], 3, rng) for k in range(4)]
        self.rgb_proj = [Conv2d(w[k], w[k], 1, rng) for k in range(4)]
        self.pyramid = DilatedPyramid(w[3], rng)
        self.inject_proj = Conv2d(knowledge_channels, w[3], 1, rng)
        self.inject_ffm = GatedRefinement(w[3], w[3], rng)
        self.decoder = TopDownDecoder(widths, rng)
        self.last_trace = None

    # ------------------------------------------------------------------
    # pipeline stages

    def _latent(self, k, f_i, f_u):
        if self.enable_lsfm:
            return self.lat_fuse[k](f_i, f_u)
        return self.lat_fuse[k].additive(f_u)

    def encode_dual(self, x_i, x_u, knowledge=None, trace=False):
        """Run both encoders with the per-level fuse/feedback interleave.

        Returns (f_i levels, f_u levels, fused f_x per level 1..4, refined
        aux features per level 1..4). Level 4's refinement is the identity;
        the optional knowledge map reroutes level 4's latent fusion input.
        """
        f_i = self.enc_i(x_i)
        f_u, f_x, refined = [], [], []
        tr = {"stage_inputs": [], "refined": []} if trace else None
        feed = self.enc_u.stem(x_u)
        for k in range(5):
            if tr is not None:
                tr["stage_inputs"].append(feed.data.copy())
            cur = self.enc_u.stages[k](feed)
            f_u.append(cur)
            if k <= 2:
                fx = self._latent(k, f_i[k], cur)
                rf = self.feedback[k](cur, fx) if self.enable_ffm else cur
                f_x.append(fx)
                refined.append(rf)
                feed = rf
            elif k == 3:
                base = cur
                if knowledge is not None:
                    zp = self.inject_proj(knowledge)
                    zr = T.interpolate(zp, (cur.shape[2], cur.shape[3]),
                                       mode="bilinear")
                    base = self.inject_ffm(cur, zr)
                f_x.append(self._latent(3, f_i[3], base))
                refined.append(cur)
                feed = cur
        if tr is not None:
            tr["refined"] = [r.data.copy() for r in refined]
            self.last_trace = tr
        return f_i, f_u, f_x, refined

    def _fused_skips(self, f_i, refined):
        skips = []
        for k in range(4):
            if self.enable_ssfm:
                skips.append(self.scan_fuse[k](f_i[k], refined[k]))
            else:
                skips.append(self.cat_fallback[k](
                    T.concat_channels(f_i[k], refined[k])))
        return skips

    def forward(self, x_i, x_u=None, knowledge=None, trace=False):
        if x_i.ndim != 4:
            raise ShapeMismatch(f"image input must be rank 4, got {x_i.shape}")
        if self.rgb_only:
            f_i = self.enc_i(x_i)
            skips = [self.rgb_proj[k](f_i[k]) for k in range(4)]
            coarse = self.pyramid(f_i[3])
        else:
            if x_u is None:
                raise MissingModality("dual mode requires the auxiliary input")
            if x_u.shape[0] != x_i.shape[0] or x_u.shape[2:] != x_i.shape[2:]:
                raise ShapeMismatch(
                    f"stream shapes disagree: {x_i.shape} vs {x_u.shape}")
            f_i, f_u, f_x, refined = self.encode_dual(x_i, x_u, knowledge, trace)
            skips = self._fused_skips(f_i, refined)
            coarse = self.pyramid(f_x[3])
        masks, edges = self.decoder(coarse, skips)
        return SegmentationOutput(masks + [coarse], edges)
