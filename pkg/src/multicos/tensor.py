"""Dense float64 tensors with reverse-mode automatic differentiation.

A global tape records every operation whose output requires a gradient.
Each op computes its result eagerly with numpy and pushes a closure that
knows how to turn the output gradient into input gradients. backward()
replays the tape in reverse and leaves gradients on the leaves.

All data is float64, C-order. Ops never mutate their inputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import (
    DomainError,
    InvalidDimensions,
    InvalidGroups,
    MalformedHeader,
    NonScalarLoss,
    ShapeMismatch,
)

# When enabled, every recorded op asserts its output is finite.
DEBUG_CHECK_FINITE = False


class Tape:
    """Ordered record of executed ops: (output tensor, backward closure)."""

    def __init__(self):
        self.nodes = []
        self.active = True

    def clear(self):
        self.nodes = []

    @contextmanager
    def paused(self):
        prev = self.active
        self.active = False
        try:
            yield self
        finally:
            self.active = prev


TAPE = Tape()


def no_grad():
    """Context manager: run ops without recording them."""
    return TAPE.paused()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out, backward_fn):
    """Push a tape node. Extension primitives (e.g. the selective scan) use
    this to register their own analytic backward."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise DomainError("non-finite values in op output")
    if TAPE.active and out.requires_grad:
        TAPE.nodes.append((out, backward_fn))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # the copy takes ownership; later accumulations may then add in place
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (the pre-broadcast operand shape)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Reverse sweep from a scalar loss. Consumes (clears) the tape."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}, expected a scalar")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(TAPE.nodes):
        if out.grad is not None:
            fn(out.grad)
    TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(x, fwd, dfn):
    x = _as_tensor(x)
    y_data = fwd(x.data)
    y = Tensor(y_data, requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g * dfn(x.data, y_data))

    record(y, bwd)
    return y


def sigmoid(x):
    return _unary(x, _sigmoid_np, lambda d, y: y * (1.0 - y))


def silu(x):
    """x * sigmoid(x)."""

    def fwd(d):
        s = _sigmoid_np(d)
        return d * s

    def dfn(d, y):
        s = _sigmoid_np(d)
        return s * (1.0 + d * (1.0 - s))

    return _unary(x, fwd, dfn)


def _sigmoid_np(d):
    # overflow-free in both tails: tanh saturates to +-1
    d = np.asarray(d, dtype=np.float64)
    return 0.5 * (np.tanh(0.5 * d) + 1.0)


def softplus(x):
    """log(1 + exp(x)), evaluated in the overflow-safe split form."""
    return _unary(
        x,
        lambda d: np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))),
        lambda d, y: _sigmoid_np(d),
    )


def relu(x):
    return _unary(x, lambda d: np.maximum(d, 0.0), lambda d, y: (d > 0).astype(np.float64))


def leaky_relu(x, slope=0.01):
    return _unary(
        x,
        lambda d: np.where(d > 0, d, slope * d),
        lambda d, y: np.where(d > 0, 1.0, slope),
    )


def exp(x):
    return _unary(x, np.exp, lambda d, y: y)


def neg(x):
    return _unary(x, lambda d: -d, lambda d, y: -np.ones_like(d))


def tabs(x):
    return _unary(x, np.abs, lambda d, y: np.sign(d))


_UNARY_KINDS = {
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "neg": neg,
    "abs": tabs,
}


def apply_unary(kind, x, **kw):
    """Dispatch an elementwise unary op by name (test surface)."""
    try:
        fn = _UNARY_KINDS[kind]
    except KeyError:
        raise InvalidDimensions(f"unknown unary kind {kind!r}") from None
    return fn(x, **kw)


# ---------------------------------------------------------------------------
# elementwise binary ops (broadcasting)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    y = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    record(y, bwd)
    return y


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    y = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    record(y, bwd)
    return y


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    y = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    record(y, bwd)
    return y


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    y = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    record(y, bwd)
    return y


_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def apply_binary(kind, a, b):
    try:
        fn = _BINARY_KINDS[kind]
    except KeyError:
        raise InvalidDimensions(f"unknown binary kind {kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        y_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    y = Tensor(y_data, requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    record(y, bwd)
    return y


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidDimensions(f"bad transpose axes {axes} for rank {x.ndim}")
    y = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, g.transpose(inv))

    record(y, bwd)
    return y


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidDimensions("concat of zero tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch(f"concat shapes {[t.shape for t in tensors]} on axis {axis}")
    y = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=any(t.requires_grad for t in tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    record(y, bwd)
    return y


def concat_channels(a, b):
    """Concatenate two feature maps along the channel axis (axis 1)."""
    return concat([a, b], axis=1)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    if start < 0 or length <= 0 or start + length > x.shape[axis]:
        raise InvalidDimensions(
            f"narrow [{start}:{start + length}] exceeds extent {x.shape[axis]}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    y = Tensor(x.data[tuple(sl)], requires_grad=x.requires_grad)

    def bwd(g):
        full = np.zeros(x.shape)
        full[tuple(sl)] = g
        _accum(x, full)

    record(y, bwd)
    return y


def split_channels(x, size):
    """Split axis 1 into (x[:, :size], x[:, size:])."""
    rest = x.shape[1] - size
    return narrow(x, 1, 0, size), narrow(x, 1, size, rest)


def permute_axis(x, axis, perm):
    """Reorder entries along one axis by an index permutation."""
    x = _as_tensor(x)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.shape[axis],):
        raise ShapeMismatch(f"perm length {perm.shape} vs extent {x.shape[axis]}")
    y = Tensor(np.take(x.data, perm, axis=axis), requires_grad=x.requires_grad)
    inv = np.argsort(perm)

    def bwd(g):
        _accum(x, np.take(g, inv, axis=axis))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    y = Tensor(x.data.sum(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    record(y, bwd)
    return y


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    y = Tensor(x.data.mean(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg / n, x.shape))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidDimensions(f"matmul expects rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents {a.shape} @ {b.shape}")
    y = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    record(y, bwd)
    return y


def affine_lastdim(x, w, b=None):
    """y[..., o] = sum_d x[..., d] * w[d, o] (+ b[o]).

    The batched companion to matmul, used for per-step projections on
    (batch, length, d) sequences.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"affine {x.shape} with weight {w.shape}")
    y_data = x.data @ w.data
    req = x.requires_grad or w.requires_grad
    if b is not None:
        b = _as_tensor(b)
        y_data = y_data + b.data
        req = req or b.requires_grad
    y = Tensor(y_data, requires_grad=req)

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
        if b is not None:
            _accum(b, g.reshape(-1, w.shape[1]).sum(axis=0))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# convolution


def _pad_hw(data, ph, pw, mode):
    if ph == 0 and pw == 0:
        return data
    width = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    return np.pad(data, width, mode=mode)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1, dilation=1, pad_mode="zeros"):
    """2-D cross-correlation on (B, C, H, W).

    w has shape (O, C // groups, kh, kw). pad_mode is "zeros" or "edge";
    edge replication keeps constant inputs constant through the conv.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidDimensions(f"conv2d expects rank-4 input and weight, got {x.ndim}, {w.ndim}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or O % groups:
        raise InvalidGroups(f"groups={groups} with C={C}, O={O}")
    if Cg != C // groups:
        raise ShapeMismatch(f"weight expects {Cg} channels/group, input has {C // groups}")
    s, p, d = int(stride), int(padding), int(dilation)
    if s < 1 or p < 0 or d < 1:
        raise InvalidDimensions(f"stride={s}, padding={p}, dilation={d}")
    Hp, Wp = H + 2 * p, W + 2 * p
    Ho = (Hp - d * (kh - 1) - 1) // s + 1
    Wo = (Wp - d * (kw - 1) - 1) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"empty conv output for input {x.shape}, kernel {w.shape}")

    np_mode = {"zeros": "constant", "edge": "edge"}[pad_mode]
    xp = _pad_hw(x.data, p, p, np_mode)

    def offset_view(arr, i, j):
        return arr[..., i * d : i * d + (Ho - 1) * s + 1 : s,
                   j * d : j * d + (Wo - 1) * s + 1 : s]

    depthwise = groups == C and O == C and Cg == 1
    dense = groups == 1

    if depthwise:
        y_data = np.zeros((B, C, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                y_data += w.data[:, 0, i, j].reshape(1, C, 1, 1) * offset_view(xp, i, j)
    elif dense:
        # im2col + one BLAS matmul per batch; K rows ordered (offset, channel)
        K = kh * kw * C
        cols5 = np.empty((B, kh * kw, C, Ho, Wo))
        for t in range(kh * kw):
            i, j = divmod(t, kw)
            cols5[:, t] = offset_view(xp, i, j)
        cols = cols5.reshape(B, K, Ho * Wo)
        w2d = np.ascontiguousarray(
            w.data.transpose(0, 2, 3, 1).reshape(O, K))
        y_data = np.matmul(w2d, cols).reshape(B, O, Ho, Wo)
    else:
        xg = xp.reshape(B, groups, Cg, Hp, Wp)
        wg = w.data.reshape(groups, O // groups, Cg, kh, kw)
        y_data = np.zeros((B, groups, O // groups, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                y_data += np.einsum("goc,bgchw->bgohw", wg[:, :, :, i, j],
                                    offset_view(xg, i, j), optimize=True)
        y_data = y_data.reshape(B, O, Ho, Wo)

    req = x.requires_grad or w.requires_grad
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ShapeMismatch(f"bias shape {b.shape}, expected ({O},)")
        y_data += b.data.reshape(1, O, 1, 1)
        req = req or b.requires_grad
    y = Tensor(y_data, requires_grad=req)

    def fold_padding(dxp):
        dxp = dxp.reshape(B, C, Hp, Wp)
        if not p:
            return dxp
        core = dxp[:, :, p:-p, p:-p].copy()
        if pad_mode == "edge":
            # replicated borders funnel their gradient into the edge rows/cols
            core[:, :, 0, :] += dxp[:, :, :p, p:-p].sum(axis=2)
            core[:, :, -1, :] += dxp[:, :, -p:, p:-p].sum(axis=2)
            core[:, :, :, 0] += dxp[:, :, p:-p, :p].sum(axis=3)
            core[:, :, :, -1] += dxp[:, :, p:-p, -p:].sum(axis=3)
            core[:, :, 0, 0] += dxp[:, :, :p, :p].sum(axis=(2, 3))
            core[:, :, 0, -1] += dxp[:, :, :p, -p:].sum(axis=(2, 3))
            core[:, :, -1, 0] += dxp[:, :, -p:, :p].sum(axis=(2, 3))
            core[:, :, -1, -1] += dxp[:, :, -p:, -p:].sum(axis=(2, 3))
        return core

    def bwd(g):
        if depthwise:
            if w.requires_grad:
                dw = np.empty_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        dw[:, 0, i, j] = (g * offset_view(xp, i, j)).sum(axis=(0, 2, 3))
                _accum(w, dw)
            if x.requires_grad:
                dxp = np.zeros((B, C, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        offset_view(dxp, i, j)[...] += \
                            w.data[:, 0, i, j].reshape(1, C, 1, 1) * g
                _accum(x, fold_padding(dxp))
        elif dense:
            g3 = g.reshape(B, O, Ho * Wo)
            if w.requires_grad:
                dw2d = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
                _accum(w, dw2d.reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
            if x.requires_grad:
                dcols = np.matmul(w2d.T, g3)
                dxp = np.zeros((B, C, Hp, Wp))
                for t in range(kh * kw):
                    i, j = divmod(t, kw)
                    offset_view(dxp, i, j)[...] += \
                        dcols[:, t * C : (t + 1) * C].reshape(B, C, Ho, Wo)
                _accum(x, fold_padding(dxp))
        else:
            xg = xp.reshape(B, groups, Cg, Hp, Wp)
            wg = w.data.reshape(groups, O // groups, Cg, kh, kw)
            gg = g.reshape(B, groups, O // groups, Ho, Wo)
            if w.requires_grad:
                dw = np.empty_like(w.data).reshape(groups, O // groups, Cg, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        dw[:, :, :, i, j] = np.einsum(
                            "bgohw,bgchw->goc", gg, offset_view(xg, i, j),
                            optimize=True)
                _accum(w, dw.reshape(w.shape))
            if x.requires_grad:
                dxp = np.zeros((B, groups, Cg, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        offset_view(dxp, i, j)[...] += np.einsum(
                            "goc,bgohw->bgchw", wg[:, :, :, i, j], gg,
                            optimize=True)
                _accum(x, fold_padding(dxp))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# normalization


def normalize(x, gamma, beta, eps=1e-5, axes=(1,)):
    """(x - mean) / sqrt(var + eps) * gamma + beta over the given axes.

    axes=(1,) is a channelwise layer norm on feature maps; axes=(0, 2, 3)
    gives batch-norm statistics. gamma/beta must broadcast against x.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = Tensor(
        gamma.data * xhat + beta.data,
        requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    n = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            t1 = gh.sum(axis=axes, keepdims=True)
            t2 = (gh * xhat).sum(axis=axes, keepdims=True)
            _accum(x, (inv / n) * (n * gh - t1 - xhat * t2))

    record(y, bwd)
    return y


def layer_norm(x, gamma, beta, eps=1e-5):
    """Channelwise normalization of a (B, C, H, W) map; gamma/beta are (C,)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise InvalidDimensions(f"layer_norm expects rank 4, got {x.ndim}")
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    g4 = reshape(gamma, (1, -1, 1, 1))
    b4 = reshape(beta, (1, -1, 1, 1))
    return normalize(x, g4, b4, eps=eps, axes=(1,))


# ---------------------------------------------------------------------------
# interpolation

_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out, mode):
    key = (n_in, n_out, mode)
    m = _RESIZE_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((n_out, n_in))
    if mode == "nearest":
        src = np.floor(np.arange(n_out) * (n_in / n_out)).astype(int)
        src = np.clip(src, 0, n_in - 1)
        m[np.arange(n_out), src] = 1.0
    else:  # bilinear, half-pixel centers
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = src - i0
        m[np.arange(n_out), i0] += 1.0 - w1
        m[np.arange(n_out), i1] += w1
    _RESIZE_CACHE[key] = m
    return m


def interpolate(x, size, mode="bilinear"):
    """Resize a (B, C, H, W) map to `size` = (H_out, W_out).

    Separable along H and W; bilinear uses half-pixel sample centers, so a
    same-size resize is the identity map.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise InvalidDimensions(f"interpolate expects rank 4, got {x.ndim}")
    if mode not in ("nearest", "bilinear"):
        raise InvalidDimensions(f"unknown interpolate mode {mode!r}")
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise InvalidDimensions(f"bad target size {size}")
    B, C, H, W = x.shape
    rh = _resize_matrix(H, ho, mode)
    rw = _resize_matrix(W, wo, mode)
    y_data = np.einsum("oh,bchw,pw->bcop", rh, x.data, rw, optimize=True)
    y = Tensor(y_data, requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, np.einsum("oh,bcop,pw->bchw", rh, g, rw, optimize=True))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# serialization: "BSFT" tensor container, "BSFK" named archive

_MAGIC = b"BSFT"
_ARCHIVE_MAGIC = b"BSFK"
_VERSION = 1


def write_tensor(f, arr):
    arr = np.asarray(arr, dtype=np.float64, order="C")
    f.write(_MAGIC)
    f.write(struct.pack("<HH", _VERSION, arr.ndim))
    for e in arr.shape:
        f.write(struct.pack("<Q", e))
    f.write(arr.tobytes(order="C"))


def read_tensor(f):
    magic = f.read(4)
    if magic != _MAGIC:
        raise MalformedHeader(f"bad tensor magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise MalformedHeader("truncated tensor header")
    version, rank = struct.unpack("<HH", head)
    if version != _VERSION:
        raise MalformedHeader(f"unsupported tensor version {version}")
    ext_raw = f.read(8 * rank)
    if len(ext_raw) != 8 * rank:
        raise MalformedHeader("truncated extents")
    shape = struct.unpack(f"<{rank}Q", ext_raw) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise MalformedHeader("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, named):
    """Write a name -> array mapping as a single archive, sorted by name."""
    with open(path, "wb") as f:
        f.write(_ARCHIVE_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(named)))
        for name in sorted(named):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            write_tensor(f, named[name])


def load_checkpoint(path):
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _ARCHIVE_MAGIC:
            raise MalformedHeader(f"bad archive magic {magic!r}")
        version, count = struct.unpack("<HI", f.read(6))
        if version != _VERSION:
            raise MalformedHeader(f"unsupported archive version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor(f)
    return out


# ---------------------------------------------------------------------------
# gradient checking


class GradReport:
    """Result of a finite-difference check.

    errors maps input index -> worst elementwise error for that input, where
    error = |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
    """

    def __init__(self, max_error, errors, tol):
        self.max_error = max_error
        self.errors = errors
        self.tol = tol
        self.passed = max_error < tol

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return f"GradReport({state}, max_error={self.max_error:.3e}, tol={self.tol:.1e})"


def grad_check(fn, inputs, step=1e-5, tol=1e-4, sample=None, seed=0):
    """Compare tape gradients of scalar fn(*inputs) against central differences.

    Only inputs with requires_grad=True are checked. `sample` caps the number
    of probed elements per input (deterministic choice); None checks all.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # FD mutates elements in place
    TAPE.clear()
    out = fn(*inputs)
    if out.size != 1:
        raise NonScalarLoss("grad_check target must be scalar")
    for t in inputs:
        t.zero_grad()
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs]

    rng = np.random.default_rng(seed)
    errors = {}
    max_error = 0.0
    with no_grad():
        for i, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            idxs = np.arange(flat.size)
            if sample is not None and flat.size > sample:
                idxs = rng.choice(flat.size, size=sample, replace=False)
            worst = 0.0
            for k in idxs:
                orig = flat[k]
                flat[k] = orig + step
                f_plus = float(fn(*inputs).data)
                flat[k] = orig - step
                f_minus = float(fn(*inputs).data)
                flat[k] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                an = analytic[i].reshape(-1)[k]
                err = abs(an - fd) / max(1.0, abs(an), abs(fd))
                if err > worst:
                    worst = err
            errors[i] = worst
            max_error = max(max_error, worst)
    return GradReport(max_error, errors, tol)
