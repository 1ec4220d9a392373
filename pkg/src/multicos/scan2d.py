"""Directional flattening of feature maps into scan sequences.

Four traversal orders cover a 2-D map; pairs are exact reverses so the set
is closed under 180-degree rotation, which makes a mean-combined scan with
shared parameters rotation-equivariant.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .errors import InvalidDimensions


class ScanDirection(Enum):
    TL_BR = "tl_br"  # row-major
    BR_TL = "br_tl"  # reverse of TL_BR
    TR_BL = "tr_bl"  # row-major over the horizontally mirrored map
    BL_TR = "bl_tr"  # reverse of TR_BL


ALL_DIRECTIONS = (
    ScanDirection.TL_BR,
    ScanDirection.BR_TL,
    ScanDirection.TR_BL,
    ScanDirection.BL_TR,
)

_PERM_CACHE = {}


def direction_perm(h, w, direction):
    """Permutation mapping scan position -> row-major pixel index."""
    if h < 1 or w < 1:
        raise InvalidDimensions(f"map extents {h}x{w}")
    key = (h, w, direction)
    perm = _PERM_CACHE.get(key)
    if perm is not None:
        return perm
    base = np.arange(h * w, dtype=np.intp)
    if direction is ScanDirection.TL_BR:
        perm = base
    elif direction is ScanDirection.BR_TL:
        perm = base[::-1].copy()
    elif direction is ScanDirection.TR_BL:
        perm = base.reshape(h, w)[:, ::-1].reshape(-1).copy()
    elif direction is ScanDirection.BL_TR:
        perm = base.reshape(h, w)[:, ::-1].reshape(-1)[::-1].copy()
    else:
        raise InvalidDimensions(f"unknown direction {direction!r}")
    _PERM_CACHE[key] = perm
    return perm


def flatten_scan(x, direction):
    """(B, C, H, W) -> (B, L, C) sequence in the direction's step order."""
    if x.ndim != 4:
        raise InvalidDimensions(f"flatten_scan expects rank 4, got {x.ndim}")
    b, c, h, w = x.shape
    seq = T.reshape(x, (b, c, h * w))
    seq = T.permute_axis(seq, 2, direction_perm(h, w, direction))
    return T.transpose(seq, (0, 2, 1))


def unflatten_scan(y, direction, h, w):
    """Inverse of flatten_scan: (B, L, C) -> (B, C, H, W)."""
    if y.ndim != 3 or y.shape[1] != h * w:
        raise InvalidDimensions(f"sequence shape {y.shape} vs map {h}x{w}")
    b, _, c = y.shape
    seq = T.transpose(y, (0, 2, 1))
    inv = np.argsort(direction_perm(h, w, direction))
    seq = T.permute_axis(seq, 2, inv)
    return T.reshape(seq, (b, c, h, w))


def multi_direction_ssm(x, scan, directions=ALL_DIRECTIONS):
    """Scan a feature map along each direction and average the results.

    `scan` maps a (B', L, C) sequence tensor to a like-shaped tensor and must
    treat batch entries independently: the directions are stacked into the
    batch axis and scanned in one call.
    """
    b, c, h, w = x.shape
    seqs = [flatten_scan(x, d) for d in directions]
    stacked = T.concat(seqs, axis=0) if len(seqs) > 1 else seqs[0]
    out = scan(stacked)
    maps = []
    for i, d in enumerate(directions):
        part = T.narrow(out, 0, i * b, b)
        maps.append(unflatten_scan(part, d, h, w))
    acc = maps[0]
    for m in maps[1:]:
        acc = T.add(acc, m)
    return acc * (1.0 / len(maps))
