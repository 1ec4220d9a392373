"""Finite-difference verification registry over every differentiable block.

Each entry builds a small seeded instance of one block, wires a scalar
readout over it, and compares tape gradients against central differences.
run_all drives the command-line verification step; the corrupt hook scales
one block's output adjoint so the harness can prove the checker fails
loudly instead of vacuously passing.
"""

import numpy as np

from . import scan2d, ssm
from . import tensor as T
from .bfser import BFSer, DilatedPyramid, TopDownDecoder
from .ckler import CKLer, translation_loss
from .cssm import ChannelAttention, CrossScanBlock, ResidualScanBlock
from .errors import ConfigError
from .fusion import GatedRefinement, LatentFusion, ScanFusion, WeightedGate
from .losses import dice_loss, structure_loss, total_seg_loss
from .nn import BatchNorm2d, Conv2d, ConvBlock, LayerNormChannels, Linear
from .scan2d import ALL_DIRECTIONS
from .tensor import Tensor

_REGISTRY = []


def register(name, tol=1e-4, sample=6, step=1e-5):
    # deep chains probe with a smaller step: an early-weight perturbation
    # moves every downstream activation, and 1e-5 is wide enough to straddle
    # a leaky-relu kink somewhere in thousands of pixels
    def deco(build):
        _REGISTRY.append((name, build, tol, sample, step))
        return build
    return deco


def registry_names():
    return [name for name, _, _, _, _ in _REGISTRY]


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _wsum(y, m):
    # random fixed weights; a plain sum is gradient-blind after batchnorm
    return (y * Tensor(m)).sum()


def _binary_mask(rng, *shape):
    m = (rng.uniform(size=shape) > 0.5).astype(np.float64)
    m.reshape(-1)[0] = 1.0
    m.reshape(-1)[-1] = 0.0
    return m


def _crooked_identity(x):
    """Identity whose recorded adjoint is scaled by 1.02. Test fixture only:
    it exists so the corruption path can prove a wrong gradient is caught."""
    y = Tensor(x.data.copy(), requires_grad=x.requires_grad)

    def bwd(g):
        T._accum(x, 1.02 * g)

    T.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# primitives


@register("linear")
def _build_linear(rng):
    lin = Linear(3, 4, rng)
    x = _p(rng, 2, 3)
    return lambda *ts: lin(ts[0]).sum(), [x] + lin.parameters()


@register("conv2d")
def _build_conv2d(rng):
    conv = Conv2d(2, 3, 3, rng, stride=2, padding=1)
    x = _p(rng, 1, 2, 5, 5)
    return lambda *ts: conv(ts[0]).sum(), [x] + conv.parameters()


@register("conv2d_depthwise_dilated")
def _build_conv2d_dw(rng):
    conv = Conv2d(4, 4, 3, rng, padding=2, dilation=2, groups=4,
                  pad_mode="edge")
    x = _p(rng, 1, 4, 6, 6)
    return lambda *ts: conv(ts[0]).sum(), [x] + conv.parameters()


@register("batchnorm")
def _build_batchnorm(rng):
    bn = BatchNorm2d(3)
    x = _p(rng, 2, 3, 4, 4)
    m = rng.normal(size=(2, 3, 4, 4))
    return lambda *ts: _wsum(bn(ts[0]), m), [x] + bn.parameters()


@register("layer_norm")
def _build_layer_norm(rng):
    ln = LayerNormChannels(4)
    x = _p(rng, 2, 4, 3, 3)
    m = rng.normal(size=(2, 4, 3, 3))
    return lambda *ts: _wsum(ln(ts[0]), m), [x] + ln.parameters()


@register("conv_block")
def _build_conv_block(rng):
    cb = ConvBlock(2, 3, 3, rng)
    x = _p(rng, 2, 2, 5, 5)
    m = rng.normal(size=(2, 3, 5, 5))
    return lambda *ts: _wsum(cb(ts[0]), m), [x] + cb.parameters()


@register("activations")
def _build_activations(rng):
    xv = rng.normal(size=(3, 5))
    x = Tensor(xv + 0.25 * np.sign(xv), requires_grad=True)

    def fn(*ts):
        out = T.sigmoid(ts[0]).sum() + T.silu(ts[0]).sum()
        out = out + T.softplus(ts[0]).sum() + T.relu(ts[0]).sum()
        out = out + T.leaky_relu(ts[0], 0.01).sum() + T.tabs(ts[0]).sum()
        return out + T.exp(ts[0] * 0.3).sum()

    return fn, [x]


@register("interpolate")
def _build_interpolate(rng):
    x = _p(rng, 1, 2, 3, 3)
    m = rng.normal(size=(1, 2, 5, 5))

    def fn(*ts):
        up = _wsum(T.interpolate(ts[0], (5, 5), mode="bilinear"), m)
        return up + T.interpolate(ts[0], (6, 6), mode="nearest").sum()

    return fn, [x]


# ---------------------------------------------------------------------------
# scans


def _scan_case(rng, length, n_state=2, d=3):
    x = _p(rng, 1, length, d)
    delta = Tensor(0.05 + rng.uniform(0.0, 0.1, size=(1, length, d)),
                   requires_grad=True)
    b_sel = _p(rng, 1, length, n_state)
    c_sel = _p(rng, 1, length, n_state)
    a = Tensor(-0.2 - rng.uniform(size=(d, n_state)), requires_grad=True)
    return [x, delta, b_sel, c_sel, a]


@register("selective_scan_taylor")
def _build_scan_taylor(rng):
    ins = _scan_case(rng, 6)
    return (lambda *ts: ssm.selective_scan(*ts, discretization="taylor").sum(),
            ins)


@register("selective_scan_zoh")
def _build_scan_zoh(rng):
    ins = _scan_case(rng, 6)
    return (lambda *ts: ssm.selective_scan(*ts, discretization="zoh").sum(),
            ins)


@register("selective_scan_chunked")
def _build_scan_chunked(rng):
    ins = _scan_case(rng, 10)
    return (lambda *ts: ssm.selective_scan(*ts, mode="chunked",
                                           chunk=4).sum(), ins)


@register("scan2d_directions")
def _build_scan2d(rng):
    h, w, c = 3, 4, 2
    x = _p(rng, 1, c, h, w)
    ws = [rng.normal(size=(1, h * w, c)) for _ in ALL_DIRECTIONS]
    wb = rng.normal(size=(1, c, h, w))

    def fn(*ts):
        total = None
        for d, m in zip(ALL_DIRECTIONS, ws):
            term = _wsum(scan2d.flatten_scan(ts[0], d), m)
            total = term if total is None else total + term
        back = scan2d.unflatten_scan(
            scan2d.flatten_scan(ts[0], ALL_DIRECTIONS[1]),
            ALL_DIRECTIONS[1], h, w)
        return total + _wsum(back, wb)

    return fn, [x]


# ---------------------------------------------------------------------------
# scan-based blocks


@register("channel_attention")
def _build_channel_attention(rng):
    ca = ChannelAttention(4, rng)
    x = _p(rng, 2, 4, 3, 3)
    return lambda *ts: ca(ts[0]).sum(), [x] + ca.parameters()


@register("residual_scan_block", sample=4)
def _build_residual_scan(rng):
    blk = ResidualScanBlock(4, 8, 2, rng)
    x = _p(rng, 1, 4, 4, 4)
    return lambda *ts: blk(ts[0]).sum(), [x] + blk.parameters()


@register("cross_scan_block", sample=4)
def _build_cross_scan(rng):
    blk = CrossScanBlock(4, 8, 2, rng)
    f_n = _p(rng, 1, 4, 4, 4)
    f_x = _p(rng, 1, 4, 4, 4)
    return (lambda *ts: blk(ts[0], ts[1]).sum(),
            [f_n, f_x] + blk.parameters())


# ---------------------------------------------------------------------------
# fusion blocks


@register("latent_fusion")
def _build_latent_fusion(rng):
    lf = LatentFusion(3, 3, rng)
    f_i = _p(rng, 1, 3, 4, 4)
    f_u = _p(rng, 1, 3, 4, 4)
    return (lambda *ts: lf(ts[0], ts[1]).sum(),
            [f_i, f_u] + lf.parameters())


@register("gated_refinement")
def _build_gated_refinement(rng):
    fm = GatedRefinement(3, 4, rng)
    f_u = _p(rng, 1, 3, 5, 5)
    f_x = _p(rng, 1, 4, 5, 5)
    m = rng.normal(size=(1, 3, 5, 5))
    return (lambda *ts: _wsum(fm(ts[0], ts[1]), m),
            [f_u, f_x] + fm.parameters())


@register("weighted_gate")
def _build_weighted_gate(rng):
    wg = WeightedGate(4, rng)
    x = _p(rng, 1, 4, 3, 3)
    return lambda *ts: wg(ts[0]).sum(), [x] + wg.parameters()


@register("scan_fusion", sample=4)
def _build_scan_fusion(rng):
    sf = ScanFusion(3, 3, 4, 4, 8, 2, rng)
    f_i = _p(rng, 1, 3, 4, 4)
    f_u = _p(rng, 1, 3, 4, 4)
    m = rng.normal(size=(1, 4, 4, 4))
    return (lambda *ts: _wsum(sf(ts[0], ts[1]), m),
            [f_i, f_u] + sf.parameters())


# ---------------------------------------------------------------------------
# heads, decoder, injection


@register("dilated_pyramid")
def _build_pyramid(rng):
    pyr = DilatedPyramid(4, rng)
    x = _p(rng, 1, 4, 4, 4)
    return lambda *ts: pyr(ts[0]).sum(), [x] + pyr.parameters()


@register("decoder", sample=4)
def _build_decoder(rng):
    dec = TopDownDecoder((2, 2, 3, 3), rng)
    coarse = _p(rng, 1, 1, 1, 1)
    skips = [_p(rng, 1, 2, 8, 8), _p(rng, 1, 2, 4, 4),
             _p(rng, 1, 3, 2, 2), _p(rng, 1, 3, 1, 1)]

    def fn(*ts):
        masks, edges = dec(ts[0], list(ts[1:5]))
        out = masks[0].sum()
        for t in masks[1:]:
            out = out + t.sum()
        for t in edges:
            out = out + t.sum()
        return out

    return fn, [coarse] + skips + dec.parameters()


@register("knowledge_injection")
def _build_injection(rng):
    proj = Conv2d(6, 3, 1, rng)
    ffm = GatedRefinement(3, 3, rng)
    z = _p(rng, 1, 6, 2, 2)
    f = _p(rng, 1, 3, 4, 4)
    m = rng.normal(size=(1, 3, 4, 4))

    def fn(*ts):
        zr = T.interpolate(proj(ts[0]), (4, 4), mode="bilinear")
        return _wsum(ffm(ts[1], zr), m)

    return fn, [z, f] + proj.parameters() + ffm.parameters()


# ---------------------------------------------------------------------------
# losses


@register("structure_loss")
def _build_structure_loss(rng):
    logits = _p(rng, 1, 1, 8, 8)
    target = _binary_mask(rng, 1, 1, 8, 8)
    return lambda *ts: structure_loss(ts[0], Tensor(target)), [logits]


@register("dice_loss")
def _build_dice_loss(rng):
    logits = _p(rng, 1, 1, 6, 6)
    target = _binary_mask(rng, 1, 1, 6, 6)
    return lambda *ts: dice_loss(ts[0], Tensor(target)), [logits]


@register("translation_loss")
def _build_translation_loss(rng):
    pred = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 6, 6)),
                  requires_grad=True)
    # keep |pred - target| well away from the L1 kink at zero
    gap = (0.05 + 0.1 * rng.uniform(size=pred.shape))
    gap *= np.where(rng.uniform(size=pred.shape) > 0.5, 1.0, -1.0)
    target = np.clip(pred.data + gap, 0.0, 1.0)
    return lambda *ts: translation_loss(ts[0], target), [pred]


# ---------------------------------------------------------------------------
# end-to-end


@register("ckler_end_to_end", tol=1e-3, sample=3, step=1e-6)
def _build_ckler(rng):
    ck = CKLer(rng, widths=(2, 3, 4), latent_channels=8)
    x = _p(rng, 2, 3, 32, 32)
    # weighted readouts keep the probe off the L1 kink (the loss has its
    # own entry) and pull gradient through the knowledge map as well
    mr = rng.normal(size=(2, 1, 32, 32))
    mz = rng.normal(size=(2, 8, 2, 2))
    probes = [x, ck.stages[0].down.conv.weight, ck.ups[2].block.conv.weight,
              ck.head.weight]

    def fn(*ts):
        recon, z = ck(ts[0])
        return _wsum(recon, mr) + _wsum(z, mz)

    return fn, probes


@register("bfser_end_to_end", tol=1e-3, sample=2, step=1e-6)
def _build_bfser(rng):
    model = BFSer(rng, widths=(2, 3, 4, 5, 6), d_model=4, d_inner=8,
                  n_state=2, knowledge_channels=8)
    x_i = _p(rng, 1, 3, 32, 32)
    x_u = _p(rng, 1, 1, 32, 32)
    z = _p(rng, 1, 8, 4, 4)
    mask = Tensor(_binary_mask(rng, 1, 1, 32, 32))
    from .synth import morph_gradient
    edge = Tensor(morph_gradient(mask.data[0, 0])[None, None])
    probes = [x_i, x_u, z,
              model.enc_i.stages[0].down.conv.weight,
              model.scan_fuse[0].gate.proj.weight,
              model.inject_proj.weight,
              model.decoder.mask_heads[0].weight]

    def fn(*ts):
        out = model(ts[0], ts[1], knowledge=ts[2])
        return total_seg_loss(out, mask, edge)

    return fn, probes


# ---------------------------------------------------------------------------
# driver


def run_all(corrupt=None, only=None, seed=0):
    """Check every registered block; returns one record per block in
    registration order. `corrupt` names a block whose output adjoint is
    deliberately skewed; `only` restricts to a subset of names."""
    names = registry_names()
    if corrupt is not None and corrupt not in names:
        raise ConfigError(f"unknown block {corrupt!r}")
    if only is not None:
        only = list(only)
        for name in only:
            if name not in names:
                raise ConfigError(f"unknown block {name!r}")
    results = []
    for name, build, tol, sample, step in _REGISTRY:
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng(seed)
        fn, inputs = build(rng)
        if corrupt == name:
            inner = fn
            fn = lambda *ts: _crooked_identity(inner(*ts))
        rep = T.grad_check(fn, inputs, step=step, tol=tol, sample=sample,
                           seed=seed)
        results.append({"block": name, "max_error": rep.max_error,
                        "tol": tol, "passed": rep.passed})
    return results
