"""Cross-modal translator: predict the auxiliary channel from RGB.

A small strided conv encoder maps the RGB image down to a latent grid at
1/16 resolution; a mirrored upsampling decoder reconstructs the auxiliary
channel from it. The latent doubles as a knowledge map for the segmenter,
so its channel count defaults to the segmenter's injection width. Training
the translator and the segmenter jointly means one optimizer over the
union of both parameter sets with the two losses summed.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .nn import Conv2d, ConvBlock, Module
from .tensor import Tensor


class _ResidualStage(Module):
    """Stride-2 reduction followed by a same-width residual refinement."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.down = ConvBlock(c_in, c_out, 3, rng, stride=2, padding=1)
        self.res = ConvBlock(c_out, c_out, 3, rng, padding=1)

    def forward(self, x):
        h = self.down(x)
        return h + self.res(h)


class _UpStage(Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.block = ConvBlock(c_in, c_out, 3, rng, padding=1)

    def forward(self, x):
        up = T.interpolate(x, (x.shape[2] * 2, x.shape[3] * 2), mode="bilinear")
        return self.block(up)


class CKLer(Module):
    """RGB -> auxiliary translator with a shared 1/16-scale latent."""

    def __init__(self, rng, in_channels=3, widths=(16, 24, 32),
                 latent_channels=64):
        super().__init__()
        if len(widths) != 3:
            raise ShapeMismatch(f"expected 3 intermediate widths, got {widths}")
        chain = (in_channels,) + tuple(widths) + (latent_channels,)
        self.stages = [_ResidualStage(chain[k], chain[k + 1], rng)
                       for k in range(4)]
        up_chain = (latent_channels,) + tuple(reversed(widths)) + (8,)
        self.ups = [_UpStage(up_chain[k], up_chain[k + 1], rng)
                    for k in range(4)]
        self.head = Conv2d(8, 1, 1, rng)
        self.latent_channels = latent_channels

    def forward(self, x):
        """Returns (reconstruction in [0, 1] at full size, latent at 1/16)."""
        if x.ndim != 4:
            raise ShapeMismatch(f"translator input must be rank 4, got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeMismatch(
                f"spatial size must be divisible by 16, got {x.shape}")
        h = x if isinstance(x, Tensor) else Tensor(x)
        for st in self.stages:
            h = st(h)
        z = h
        for up in self.ups:
            h = up(h)
        return T.sigmoid(self.head(h)), z


def translation_loss(pred, target):
    """Mean absolute error between reconstruction and the true auxiliary map."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    return T.tmean(T.tabs(pred - target.detach()))
