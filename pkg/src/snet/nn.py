"""Parameterized layers: conv blocks, attention, patch embedding, up-sampling."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class ParamSet:
    """Named trainable tensors plus batch-norm running statistics.

    Each parameter draws its initial values from a generator seeded by
    ``(init_seed, crc32(name))``, so initialization is reproducible and
    independent of creation order.
    """

    def __init__(self, init_seed=0, dtype=np.float64):
        self.init_seed = int(init_seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, dict[str, np.ndarray]] = {}

    def rng(self, name):
        return np.random.default_rng([self.init_seed, zlib.crc32(name.encode())])

    def add(self, name, values):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(np.asarray(values, dtype=self.dtype),
                                   requires_grad=True, name=name)
        return self.params[name]

    def trunc_normal(self, name, shape, std=0.02):
        rng = self.rng(name)
        vals = rng.standard_normal(shape)
        bad = np.abs(vals) > 2.0
        while bad.any():
            vals[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(vals) > 2.0
        return self.add(name, vals * std)

    def kaiming_uniform(self, name, shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return self.add(name, self.rng(name).uniform(-bound, bound, shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    def norm_stats(self, name, channels):
        self.buffers[name] = {"mean": np.zeros(channels, dtype=self.dtype),
                              "var": np.ones(channels, dtype=self.dtype)}
        return self.buffers[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def stats(self, name):
        return self.buffers[name]

    def scope(self, prefix):
        return Scope(self, prefix)

    def count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """Flat name -> array mapping of parameters and running statistics."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, buf in self.buffers.items():
            out[f"stats/{k}/mean"] = buf["mean"]
            out[f"stats/{k}/var"] = buf["var"]
        return out

    def load_state(self, state):
        for k, p in self.params.items():
            arr = state.get(f"param/{k}")
            if arr is None or arr.shape != p.shape:
                raise ConfigError(f"checkpoint lacks a matching entry for parameter {k}")
            p.data = np.array(arr, dtype=self.dtype)
        for k, buf in self.buffers.items():
            for key in ("mean", "var"):
                arr = state.get(f"stats/{k}/{key}")
                if arr is None or arr.shape != buf[key].shape:
                    raise ConfigError(f"checkpoint lacks running {key} for {k}")
                buf[key][...] = arr


class Scope:
    """Prefixed view into a ParamSet; blocks use relative names."""

    def __init__(self, root, prefix):
        self.root = root
        self.prefix = prefix

    def _full(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name):
        return self.root.params[self._full(name)]

    def __contains__(self, name):
        return self._full(name) in self.root.params

    def stats(self, name):
        return self.root.buffers[self._full(name)]

    def scope(self, name):
        return Scope(self.root, self._full(name))

    def trunc_normal(self, name, shape, std=0.02):
        return self.root.trunc_normal(self._full(name), shape, std)

    def kaiming_uniform(self, name, shape, fan_in):
        return self.root.kaiming_uniform(self._full(name), shape, fan_in)

    def zeros(self, name, shape):
        return self.root.zeros(self._full(name), shape)

    def ones(self, name, shape):
        return self.root.ones(self._full(name), shape)

    def norm_stats(self, name, channels):
        return self.root.norm_stats(self._full(name), channels)


@dataclass(frozen=True)
class StageSpec:
    in_channels: int
    out_channels: int
    resolution_divisor: int
    kind: str = "cnn"

    def __post_init__(self):
        d = self.resolution_divisor
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("stage channels must be positive")
        if d < 1 or d & (d - 1):
            raise ConfigError(f"resolution divisor {d} is not a power of two")
        if self.kind not in ("cnn", "vit"):
            raise ConfigError(f"unknown stage kind {self.kind!r}")

    def check_input(self, size):
        if size % self.resolution_divisor:
            raise ConfigError(
                f"resolution divisor {self.resolution_divisor} does not divide {size}")


def default_heads(channels):
    return max(1, math.ceil(channels / 32))


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def init_conv(ps, name, cin, cout, k, groups=1, bias=True):
    ps.kaiming_uniform(f"{name}.weight", (cout, cin // groups, k, k), (cin // groups) * k * k)
    if bias:
        ps.zeros(f"{name}.bias", (cout,))


def conv(x, ps, name, stride=1, padding=0, groups=1):
    bias = ps[f"{name}.bias"] if f"{name}.bias" in ps else None
    return T.conv2d(x, ps[f"{name}.weight"], bias, stride=stride, padding=padding, groups=groups)


def init_norm(ps, name, channels):
    ps.ones(f"{name}.scale", (channels,))
    ps.zeros(f"{name}.shift", (channels,))
    ps.norm_stats(name, channels)


def norm(x, ps, name, training):
    return T.batch_norm(x, ps[f"{name}.scale"], ps[f"{name}.shift"],
                        training=training, running=ps.stats(name))


def init_conv_bn_gelu(ps, cin, cout, k=3, separable=False):
    """Conv-BN-GeLU; ``separable`` uses a k x k depth-wise conv then 1x1 pointwise."""
    if separable:
        init_conv(ps, "dw", cin, cin, k, groups=cin, bias=False)
        init_conv(ps, "pw", cin, cout, 1, bias=False)
    else:
        init_conv(ps, "conv", cin, cout, k, bias=False)
    init_norm(ps, "bn", cout)


def conv_bn_gelu(x, ps, training=True, stride=1):
    if "dw.weight" in ps:
        k = ps["dw.weight"].shape[-1]
        x = conv(x, ps, "dw", stride=stride, padding=(k - 1) // 2, groups=x.shape[1])
        x = conv(x, ps, "pw")
    else:
        k = ps["conv.weight"].shape[-1]
        x = conv(x, ps, "conv", stride=stride, padding=(k - 1) // 2)
    return T.gelu(norm(x, ps, "bn", training))


def init_dwconv_block(ps, channels, k=3):
    init_conv(ps, "dw", channels, channels, k, groups=channels)


def dwconv_block(x, ps):
    k = ps["dw.weight"].shape[-1]
    return conv(x, ps, "dw", padding=(k - 1) // 2, groups=x.shape[1])


def init_patch_embed(ps, spec: StageSpec, stride):
    init_conv(ps, "proj", spec.in_channels, spec.out_channels, stride)


def patch_embed(x, ps, stride):
    """Non-overlapping strided conv: resolution / stride, channels -> out."""
    _, _, h, w = x.shape
    if h % stride or w % stride:
        raise ConfigError(f"spatial size {h}x{w} not divisible by patch stride {stride}")
    return conv(x, ps, "proj", stride=stride)


def init_upsample_block(ps, cin, cskip):
    half = cin // 2
    if half < 1 or cin % 2:
        raise ConfigError(f"upsample_block needs an even channel count, got {cin}")
    init_conv_bn_gelu(ps.scope("up"), cin, half)
    init_conv_bn_gelu(ps.scope("merge"), half + cskip, half)


def upsample_block(x, skip, ps, training=True):
    """Nearest x2 + conv to half width, concatenate skip, Conv-BN-GeLU."""
    b, c, h, w = x.shape
    if skip.shape[0] != b or skip.shape[2:] != (2 * h, 2 * w):
        raise ConfigError(f"skip {skip.shape} does not match 2x upsampled {x.shape}")
    y = conv_bn_gelu(T.upsample_nearest(x, 2), ps.scope("up"), training)
    return conv_bn_gelu(T.concat_channels([y, skip]), ps.scope("merge"), training)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def init_linear(ps, name, din, dout, bias=True):
    ps.trunc_normal(f"{name}.weight", (din, dout))
    if bias:
        ps.zeros(f"{name}.bias", (dout,))


def linear(x, ps, name):
    y = T.matmul(x, ps[f"{name}.weight"])
    if f"{name}.bias" in ps:
        y = y + ps[f"{name}.bias"]
    return y


def init_attention(ps, channels, heads=1):
    if channels % heads:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    for name in ("wq", "wk", "wv", "wo"):
        init_linear(ps, name, channels, channels)


def _split_heads(x, heads):
    b, n, c = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def cross_attention(q_tokens, kv_tokens, ps, heads=1):
    """Queries from ``q_tokens``; keys and values from ``kv_tokens``."""
    c = ps["wq.weight"].shape[0]
    if q_tokens.shape[-1] != c or kv_tokens.shape[-1] != c:
        raise ConfigError(
            f"token channels {q_tokens.shape[-1]}/{kv_tokens.shape[-1]} != projection width {c}")
    if q_tokens.shape[0] != kv_tokens.shape[0]:
        raise ConfigError("query and key/value batches differ")
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    q = _split_heads(linear(q_tokens, ps, "wq"), heads)
    k = _split_heads(linear(kv_tokens, ps, "wk"), heads)
    v = _split_heads(linear(kv_tokens, ps, "wv"), heads)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(c // heads))
    attn = T.softmax(scores, axis=-1)
    return linear(_merge_heads(T.matmul(attn, v)), ps, "wo")


def mhsa(tokens, ps, heads=1):
    return cross_attention(tokens, tokens, ps, heads)


def init_layer_norm(ps, name, channels):
    ps.ones(f"{name}.scale", (channels,))
    ps.zeros(f"{name}.shift", (channels,))


def layer_norm(x, ps, name):
    return T.layer_norm(x, ps[f"{name}.scale"], ps[f"{name}.shift"])


def init_vit_block(ps, channels, heads, mlp_ratio=2):
    init_layer_norm(ps, "ln1", channels)
    init_attention(ps.scope("attn"), channels, heads)
    init_layer_norm(ps, "ln2", channels)
    init_linear(ps, "fc1", channels, channels * mlp_ratio)
    init_linear(ps, "fc2", channels * mlp_ratio, channels)


def vit_block(tokens, ps, heads):
    x = tokens + mhsa(layer_norm(tokens, ps, "ln1"), ps.scope("attn"), heads)
    h = T.gelu(linear(layer_norm(x, ps, "ln2"), ps, "fc1"))
    return x + linear(h, ps, "fc2")
