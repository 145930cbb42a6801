"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive builds a node holding its parents and a closure mapping the
output gradient to parent gradients.  Nodes carry a monotonically increasing
sequence number, so sorting the reachable nodes by sequence reproduces
execution order and ``backward`` walks it once in reverse.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, GraphError, NumericError

_seq = itertools.count()
_state = threading.local()

CHECK_FINITE = True


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check(arr, op):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_seq", "_freed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._freed = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self):
        return self.shape[0]

    # -- operators -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._freed = False
    out._op = op
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is consumed: interior nodes drop their closures afterwards and
    a second traversal through them raises ``GraphError``.
    """
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._freed:
        raise GraphError("graph already consumed by a previous backward call")
    if not root.requires_grad:
        raise GraphError("root does not depend on any requires_grad tensor")

    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._freed:
            raise GraphError("graph already consumed by a previous backward call")
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    grads = {id(root): np.ones_like(root.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|)."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.exp(-np.logaddexp(0, -x))
        return (g * s,)

    return _make(out, (a,), bw, "softplus")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    return _make(data, tensors, bw, "concat")


def take(a, axis, start, stop):
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw, "take")


def split(a, sizes, axis=0):
    if sum(sizes) != a.shape[axis]:
        raise ConfigError(f"split sizes {sizes} do not cover extent {a.shape[axis]}")
    out, lo = [], 0
    for n in sizes:
        out.append(take(a, axis, lo, lo + n))
        lo += n
    return out


def concat_channels(tensors):
    return concat(tensors, axis=1)


def split_channels(a, sizes):
    return split(a, sizes, axis=1)


def flatten_tokens(a):
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = a.shape
    return transpose(reshape(a, (b, c, h * w)), (0, 2, 1))


def unflatten_tokens(a, height, width):
    """(B, H*W, C) -> (B, C, H, W); exact inverse of ``flatten_tokens``."""
    b, n, c = a.shape
    if n != height * width:
        raise ConfigError(f"token count {n} != {height}x{width}")
    return reshape(transpose(a, (0, 2, 1)), (b, c, height, width))


def upsample_nearest(a, factor):
    factor = int(factor)
    if factor == 1:
        return a
    b, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (a,), bw, "upsample_nearest")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def batch_norm(x, scale, shift, eps=1e-5, training=True, running=None, momentum=0.1):
    """Per-channel normalization of a (B, C, H, W) map.

    ``running`` is a dict with ``mean``/``var`` arrays; it is updated in place
    only when ``training`` is true and is required when it is false.
    """
    if x.ndim != 4:
        raise ConfigError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if b == 0:
        raise ConfigError("batch_norm on an empty batch")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigError(f"scale/shift must have length {c}")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None:
            n = b * h * w
            unbiased = var * n / max(n - 1, 1)
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * mu
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * unbiased
    else:
        if running is None:
            raise ConfigError("eval-mode batch_norm needs running statistics")
        mu, var = running["mean"], running["var"]
    mu = mu.astype(xd.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    count = b * h * w

    def bw(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None, None]
            if training:
                gx = (inv[None, :, None, None] / count) * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bw, "batch_norm")


def layer_norm(x, scale, shift, eps=1e-5):
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * scale.data + shift.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gscale = (g * xhat).sum(axis=lead)
        gshift = g.sum(axis=lead)
        gxhat = g * scale.data
        gx = (inv / n) * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation of (B, C, H, W) with (O, C/groups, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    b, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    if c % groups or o % groups or cg != c // groups:
        raise ConfigError(
            f"conv2d channel mismatch: input {c}, kernel {kernel.shape}, groups {groups}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError("conv2d output would be empty")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = kernel.data
    s = stride
    hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1

    def window(arr, i, j):
        return arr[:, :, i:i + hspan:s, j:j + wspan:s]

    if groups == 1:
        cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = cols[:, :, ::s, ::s][:, :, :ho, :wo]          # (B, C, Ho, Wo, kh, kw)
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    else:
        og = o // groups
        xg = xp.reshape(b, groups, cg, *xp.shape[2:])
        wg = wd.reshape(groups, og, cg, kh, kw)
        out = np.zeros((b, groups, og, ho, wo), dtype=np.result_type(xp, wd))
        depthwise = cg == 1 and og == 1
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, :, i:i + hspan:s, j:j + wspan:s]
                if depthwise:
                    out += xs * wg[:, 0, 0, i, j][None, :, None, None, None]
                else:
                    out += np.einsum("bgchw,goc->bgohw", xs, wg[:, :, :, i, j])
        out = out.reshape(b, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if groups == 1:
            if kernel.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
                gx = gxp
        else:
            og = o // groups
            gg = g.reshape(b, groups, og, ho, wo)
            gwg = np.zeros_like(wg)
            gxg = np.zeros(xg.shape, dtype=g.dtype)
            depthwise = cg == 1 and og == 1
            for i in range(kh):
                for j in range(kw):
                    xs = xg[:, :, :, i:i + hspan:s, j:j + wspan:s]
                    dst = gxg[:, :, :, i:i + hspan:s, j:j + wspan:s]
                    if depthwise:
                        gwg[:, 0, 0, i, j] = (gg * xs).sum(axis=(0, 2, 3, 4))
                        dst += gg * wg[:, 0, 0, i, j][None, :, None, None, None]
                    else:
                        gwg[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, xs)
                        dst += np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j])
            gw = gwg.reshape(wd.shape)
            gx = gxg.reshape(xp.shape)
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")
