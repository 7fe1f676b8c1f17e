"""Parameter containers and the small layer zoo built on the autodiff core."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named leaf tensor that wants gradients."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Tiny module tree: registers Parameters and sub-Modules on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
            p._reach = bool(flag)

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, m):
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 1.0
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = _uniform(rng, d_in, (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Embedding(Module):
    def __init__(self, count, dim, rng, std=0.02):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, std, size=(count, dim)))

    def __call__(self, ids):
        return ad.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(Module):
    """Convolution over (B, C, L); 'same' padding by default when stride=1."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=None,
                 dilation=1, bias=True, zero_init=False):
        super().__init__()
        if pad is None:
            pad = (kernel - 1) * dilation // 2
        fan_in = c_in * kernel
        if zero_init:
            w = np.zeros((c_out, c_in, kernel))
        else:
            w = _uniform(rng, fan_in, (c_out, c_in, kernel))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.bias, self.stride, self.pad,
                         self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, bias=True):
        super().__init__()
        fan_in = c_in * kernel // stride
        self.weight = Parameter(_uniform(rng, max(fan_in, 1), (c_in, c_out, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return ad.conv_transpose1d(x, self.weight, self.bias, self.stride,
                                   self.pad, 1)


class SelfAttention(Module):
    """Multi-head self-attention over a (n, h) sequence."""

    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x):
        n = x.shape[0]
        hd = self.dim // self.heads
        q = ad.transpose(ad.reshape(self.wq(x), n, self.heads, hd), (1, 0, 2))
        k = ad.transpose(ad.reshape(self.wk(x), n, self.heads, hd), (1, 0, 2))
        v = ad.transpose(ad.reshape(self.wv(x), n, self.heads, hd), (1, 0, 2))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), n, self.dim)
        return self.wo(out)
