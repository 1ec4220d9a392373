"""Parameter containers and the optimizer.

Modules register Tensor parameters and numpy buffers as attributes; names in
checkpoints are the dotted attribute paths, so construction order fixes the
manifest. Weights draw from a caller-supplied Generator: uniform in
+-1/sqrt(fan_in), biases zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name, value):
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self):
        for name, val in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(val, (Module, Tensor)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            else:
                yield from val.named_parameters(prefix=full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, val in self._buffers.items():
            yield f"{prefix}{name}", val
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix=f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[name] = buf.copy()
        return out

    def load_state_dict(self, state, strict=True):
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        seen = set()
        for name, arr in state.items():
            if name in own_params:
                p = own_params[name]
                if p.data.shape != arr.shape:
                    raise ShapeMismatch(f"param {name}: {p.data.shape} vs {arr.shape}")
                p.data = np.array(arr, dtype=np.float64)
                seen.add(name)
            elif name in own_bufs:
                own_bufs[name][...] = arr
                seen.add(name)
            elif strict:
                raise KeyError(f"unexpected entry {name!r} in state")
        if strict:
            missing = (set(own_params) | set(own_bufs)) - seen
            if missing:
                raise KeyError(f"missing entries: {sorted(missing)}")

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Linear(Module):
    """Affine map on the last axis."""

    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x):
        return T.affine_lastdim(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, groups=1,
                 dilation=1, bias=True, pad_mode="zeros"):
        super().__init__()
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = uniform_init(rng, (c_out, c_in // groups, kernel, kernel), fan_in)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.dilation = dilation
        self.pad_mode = pad_mode

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups,
                        dilation=self.dilation, pad_mode=self.pad_mode)


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval.

    running <- (1 - momentum) * running + momentum * batch, momentum 0.1.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        g4 = T.reshape(self.gamma, (1, -1, 1, 1))
        b4 = T.reshape(self.beta, (1, -1, 1, 1))
        if self.training:
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var
            return T.normalize(x, g4, b4, eps=self.eps, axes=(0, 2, 3))
        rm = self._buffers["running_mean"].reshape(1, -1, 1, 1)
        rv = self._buffers["running_var"].reshape(1, -1, 1, 1)
        inv = Tensor(1.0 / np.sqrt(rv + self.eps))
        scale = T.mul(g4, inv)
        shift = T.sub(b4, T.mul(Tensor(rm), scale))
        return T.add(T.mul(x, scale), shift)


class LayerNormChannels(Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class ConvBlock(Module):
    """Conv -> LeakyReLU(0.01) -> BatchNorm, the standard conv unit here."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None, dilation=1,
                 pad_mode="zeros"):
        super().__init__()
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=padding,
                           dilation=dilation, pad_mode=pad_mode)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(T.leaky_relu(self.conv(x), 0.01))


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        out = {"_opt.t": np.array(float(self.t))}
        for k in self.params:
            out[f"_opt.m.{k}"] = self.m[k].copy()
            out[f"_opt.v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state):
        self.t = int(state["_opt.t"])
        for k in self.params:
            self.m[k] = np.array(state[f"_opt.m.{k}"])
            self.v[k] = np.array(state[f"_opt.v.{k}"])
