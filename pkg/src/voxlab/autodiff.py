"""Minimal dense-tensor reverse-mode automatic differentiation on numpy.

Every loss in this package is a scalar built from the operations below; the
single backward pass in :func:`backward` is the only source of gradients
anywhere.  Arrays are float64 throughout.  Any NaN or Inf produced by a
forward op or a backward adjoint is a hard error.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class NonFiniteError(ValueError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure numpy forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _ensure_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in result of op '{op}'")


class Tensor:
    """A dense float64 array plus the tape edge that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "_reach")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._reach = self.requires_grad

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data, parents, vjp, op):
        """Build an interior node; collapses to a constant when no parent can
        carry gradient or grads are globally disabled."""
        data = np.asarray(data, dtype=DTYPE)
        _ensure_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        if _GRAD_ENABLED and any(p._reach for p in parents):
            out._parents = tuple(parents)
            out._vjp = vjp
            out._op = op
            out._reach = True
        else:
            out._parents = ()
            out._vjp = None
            out._op = op
            out._reach = False
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # -- operator overloads ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, e):
        return power(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def astensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def constant(x):
    """A gradient-free tensor view of ``x``."""
    return astensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = astensor(a), astensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._node(ad * bd, (a, b), vjp, "mul")


def div(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return Tensor._node(ad / bd, (a, b), vjp, "div")


def power(a, e):
    a = astensor(a)
    e = float(e)
    ad = a.data

    def vjp(g):
        return (g * e * ad ** (e - 1.0),)

    return Tensor._node(ad ** e, (a,), vjp, "pow")


def exp(a):
    a = astensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor._node(out, (a,), vjp, "exp")


def log(a):
    a = astensor(a)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(ad)
    return Tensor._node(out, (a,), vjp, "log")


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor._node(out, (a,), vjp, "sqrt")


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._node(out, (a,), vjp, "tanh")


def sigmoid(a):
    a = astensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._node(out, (a,), vjp, "sigmoid")


def relu(a):
    a = astensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return Tensor._node(a.data * mask, (a,), vjp, "relu")


def leaky_relu(a, slope=0.1):
    a = astensor(a)
    mask = a.data > 0
    fac = np.where(mask, 1.0, slope)

    def vjp(g):
        return (g * fac,)

    return Tensor._node(a.data * fac, (a,), vjp, "leaky_relu")


def swish(a):
    """x * sigmoid(x), fused."""
    a = astensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = x * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)

    return Tensor._node(out, (a,), vjp, "swish")


def softplus(a):
    """log(1 + exp(x)), overflow-stable."""
    a = astensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Tensor._node(out, (a,), vjp, "softplus")


def abs_(a):
    a = astensor(a)
    sgn = np.sign(a.data)

    def vjp(g):
        return (g * sgn,)

    return Tensor._node(np.abs(a.data), (a,), vjp, "abs")


def clip_min(a, floor):
    """max(x, floor) with zero gradient below the floor."""
    a = astensor(a)
    floor = float(floor)
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return Tensor._node(np.maximum(a.data, floor), (a,), vjp, "clip_min")


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    shape = a.data.shape

    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= shape[ax % len(shape)]

    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return Tensor._node(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def logsumexp(a, axis=-1, keepdims=False):
    a = astensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    sm = np.exp(x - (out if keepdims else np.expand_dims(out, axis)))

    def vjp(g):
        gexp = g if keepdims else np.expand_dims(g, axis)
        return (gexp * sm,)

    return Tensor._node(out, (a,), vjp, "logsumexp")


def softmax(a, axis=-1):
    a = astensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._node(out, (a,), vjp, "softmax")


# -- shape manipulation -------------------------------------------------------


def reshape(a, *shape):
    a = astensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._node(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a, axes=None):
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor._node(a.data.transpose(axes), (a,), vjp, "transpose")


def concat(parts, axis=0):
    parts = [astensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([p.data for p in parts], axis=axis),
                        tuple(parts), vjp, "concat")


def index(a, key):
    """Basic (slice / integer) indexing."""
    a = astensor(a)
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return Tensor._node(a.data[key], (a,), vjp, "index")


def take1d(a, idx):
    """Gather from a 1-D tensor with an arbitrary-shape integer index array.

    Repeated indices accumulate on the backward pass, so this doubles as the
    framing primitive for the differentiable STFT.
    """
    a = astensor(a)
    if a.data.ndim != 1:
        raise ValueError("take1d expects a 1-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    n = a.data.shape[0]

    def vjp(g):
        out = np.zeros(n, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._node(a.data[idx], (a,), vjp, "take1d")


def pad_constant(a, pad_width, value=0.0):
    """Constant padding; pad_width follows numpy's per-axis convention."""
    a = astensor(a)
    slices = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.data.shape))

    def vjp(g):
        return (np.ascontiguousarray(g[slices]),)

    return Tensor._node(np.pad(a.data, pad_width, constant_values=value),
                        (a,), vjp, "pad")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    need_a, need_b = a._reach, b._reach

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._node(np.matmul(ad, bd), (a, b), vjp, "matmul")


def embedding(table, ids):
    """Row lookup in a (V, h) table with scatter-add backward."""
    table = astensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vshape = table.data.shape

    def vjp(g):
        out = np.zeros(vshape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._node(table.data[ids], (table,), vjp, "embedding")


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learnable gain/bias."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data
    need_x = x._reach

    def vjp(g):
        gx = None
        if need_x:
            gy = g * gain.data
            n = xd.shape[-1]
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - y * (gy * y).sum(axis=-1, keepdims=True) / n)
        red = tuple(range(xd.ndim - 1))
        ggain = (g * y).sum(axis=red) if xd.ndim > 1 else g * y
        gbias = g.sum(axis=red) if xd.ndim > 1 else g
        return gx, ggain, gbias

    return Tensor._node(out, (x, gain, bias), vjp, "layer_norm")


def dropout(x, rate, rng):
    """Inverted dropout.  The mask is drawn once and stored for backward."""
    x = astensor(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep

    def vjp(g):
        return (g * mask,)

    return Tensor._node(x.data * mask, (x,), vjp, "dropout")


def stop_gradient(x):
    """Pass values through, block gradient flow entirely."""
    x = astensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    out._op = "stop_gradient"
    out._reach = False
    return out


def custom(data, parents, vjp, op="custom"):
    """Build a node with a caller-supplied vector-Jacobian product.

    ``vjp(g)`` must return one gradient array (or None) per parent.
    """
    return Tensor._node(data, tuple(astensor(p) for p in parents), vjp, op)


# -- convolution --------------------------------------------------------------


def _im2col(xp, kernel, stride, dilation):
    """(B, C, Lp) -> (B, L_out, C, K) window view (no copy)."""
    span = (kernel - 1) * dilation + 1
    if xp.shape[2] < span:
        raise ValueError(
            f"conv input length {xp.shape[2]} shorter than kernel span {span}")
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=2)
    win = win[:, :, ::stride, ::dilation]
    return win.transpose(0, 2, 1, 3)


def _conv_fwd(x, w, stride, pad, dilation):
    B, C, L = x.shape
    Cout, Cin, K = w.shape
    if Cin != C:
        raise ValueError(f"conv channel mismatch: input {C}, weight {Cin}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    cols = _im2col(xp, K, stride, dilation)
    Lout = cols.shape[1]
    out = cols.reshape(B * Lout, C * K) @ w.reshape(Cout, C * K).T
    return out.reshape(B, Lout, Cout).transpose(0, 2, 1)


def _conv_weight_grad(x, g, stride, pad, dilation, K):
    B, C, L = x.shape
    Cout = g.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    cols = _im2col(xp, K, stride, dilation)
    Lout = cols.shape[1]
    gm = g.transpose(1, 0, 2).reshape(Cout, B * Lout)
    return (gm @ cols.reshape(B * Lout, C * K)).reshape(Cout, C, K)


def _conv_input_grad(g, w, stride, pad, dilation, L_in):
    """Adjoint of _conv_fwd with respect to its input (also the transposed-
    convolution forward map)."""
    B, Cout, Lout = g.shape
    Cw, Cin, K = w.shape
    if Cw != Cout:
        raise ValueError(f"conv adjoint channel mismatch: {Cout} vs {Cw}")
    span = (K - 1) * dilation + 1
    L_up = (Lout - 1) * stride + 1
    offset = span - 1 - pad
    G = np.zeros((B, Cout, L_in + span - 1), dtype=g.dtype)
    lo = max(0, offset)
    hi = min(L_in + span - 1, offset + L_up)
    if lo < hi:
        up = np.zeros((B, Cout, L_up), dtype=g.dtype)
        up[:, :, ::stride] = g
        G[:, :, lo:hi] = up[:, :, lo - offset:hi - offset]
    wf = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
    return _conv_fwd(G, wf, 1, 0, dilation)[:, :, :L_in]


def conv1d(x, w, b=None, stride=1, pad=0, dilation=1):
    """1-D convolution: x (B, C_in, L) with w (C_out, C_in, K)."""
    x, w = astensor(x), astensor(w)
    xd, wd = x.data, w.data
    out = _conv_fwd(xd, wd, stride, pad, dilation)
    K = wd.shape[2]
    L_in = xd.shape[2]
    need_x, need_w = x._reach, w._reach
    if b is None:
        def vjp(g):
            gx = _conv_input_grad(g, wd, stride, pad, dilation, L_in) if need_x else None
            gw = _conv_weight_grad(xd, g, stride, pad, dilation, K) if need_w else None
            return gx, gw

        return Tensor._node(out, (x, w), vjp, "conv1d")

    b = astensor(b)
    need_b = b._reach

    def vjp(g):
        gx = _conv_input_grad(g, wd, stride, pad, dilation, L_in) if need_x else None
        gw = _conv_weight_grad(xd, g, stride, pad, dilation, K) if need_w else None
        gb = g.sum(axis=(0, 2)) if need_b else None
        return gx, gw, gb

    return Tensor._node(out + b.data[None, :, None], (x, w, b), vjp, "conv1d")


def conv_transpose1d(x, w, b=None, stride=1, pad=0, dilation=1):
    """Transposed 1-D convolution: x (B, C_in, L) with w (C_in, C_out, K).

    Output length is (L-1)*stride + (K-1)*dilation + 1 - 2*pad, the exact
    adjoint of :func:`conv1d` with the same geometry.
    """
    x, w = astensor(x), astensor(w)
    xd, wd = x.data, w.data
    K = wd.shape[2]
    span = (K - 1) * dilation + 1
    L = xd.shape[2]
    L_out = (L - 1) * stride + span - 2 * pad
    out = _conv_input_grad(xd, wd, stride, pad, dilation, L_out)
    need_x, need_w = x._reach, w._reach
    if b is None:
        def vjp(g):
            gx = _conv_fwd(g, wd, stride, pad, dilation) if need_x else None
            gw = _conv_weight_grad(g, xd, stride, pad, dilation, K) if need_w else None
            return gx, gw

        return Tensor._node(out, (x, w), vjp, "conv_transpose1d")

    b = astensor(b)
    need_b = b._reach

    def vjp(g):
        gx = _conv_fwd(g, wd, stride, pad, dilation) if need_x else None
        gw = _conv_weight_grad(g, xd, stride, pad, dilation, K) if need_w else None
        gb = g.sum(axis=(0, 2)) if need_b else None
        return gx, gw, gb

    return Tensor._node(out + b.data[None, :, None], (x, w, b), vjp, "conv_transpose1d")


# -- backward pass ------------------------------------------------------------


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._reach:
                stack.append((p, False))
    return order


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss.

    Returns the gradient record: an insertion-ordered dict mapping each
    reachable grad-enabled leaf tensor to its gradient array.  Leaves that the
    loss does not reach (or that sit behind a gradient stop) get no entry.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    _ensure_finite(loss.data, "loss")
    grads = {id(loss): np.ones_like(loss.data)}
    record = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent._reach:
                    continue
                _ensure_finite(pg, f"{node._op} (backward)")
                pg = np.asarray(pg, dtype=DTYPE)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            record[node] = g.reshape(node.data.shape)
    return record


def finite_diff_check(fn, point, step=1e-5):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``point`` is a Tensor or a sequence of Tensors; ``fn`` must map them to a
    scalar Tensor and must be deterministic (two forward evaluations are
    compared exactly; disagreement is an error).  Returns the maximum relative
    error, with denominator max(|analytic|, |numeric|, 1e-8) per element.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p._reach = True

    y1 = fn(*points)
    y2 = fn(*points)
    if not np.array_equal(y1.data, y2.data):
        raise ValueError("finite_diff_check: fn is not deterministic "
                         "(two forward passes disagree)")
    if y1.data.size != 1:
        raise ValueError("finite_diff_check: fn must return a scalar")
    record = backward(y1)

    worst = 0.0
    for p in points:
        analytic = record.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*points).data)
            flat[i] = orig - step
            lo = float(fn(*points).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
