"""Feature enhancement, feature fusion and global attention blocks.

FEB mixes two consecutive ViT stages through joint self-attention over their
concatenated tokens, FFB merges a 4d-channel CNN map with a d-channel ViT map
into 2d channels in two concatenate-and-convolve rounds, and GAB combines two
self-attention maps, swaps values between layers and finishes with
cross-attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import nn
from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class FusionPair:
    cnn_stage: int
    vit_stage: int
    staggered: bool = True

    def __post_init__(self):
        if self.staggered and not self.cnn_stage > self.vit_stage:
            raise ConfigError(
                f"stagger pair needs cnn_stage > vit_stage, got ({self.cnn_stage}, {self.vit_stage})")
        if not self.staggered and self.cnn_stage != self.vit_stage:
            raise ConfigError(
                f"unstagger pair needs equal stages, got ({self.cnn_stage}, {self.vit_stage})")


# ---------------------------------------------------------------------------
# FEB
# ---------------------------------------------------------------------------

def init_feb(ps, c_i, c_ip1, heads=1):
    width = min(c_i, c_ip1)
    for name, c in (("lower", c_i), ("upper", c_ip1)):
        if c != width:
            nn.init_linear(ps, f"{name}.down", c, width)
            nn.init_linear(ps, f"{name}.up", width, c)
        nn.init_dwconv_block(ps.scope(f"{name}.dwconv"), c)
    nn.init_layer_norm(ps, "ln", width)
    nn.init_attention(ps.scope("attn"), width, heads)


def _feb_mixer(ps, heads):
    def mix(z_i, z_ip1):
        parts = []
        for name, z in (("lower", z_i), ("upper", z_ip1)):
            parts.append(nn.linear(z, ps, f"{name}.down") if f"{name}.down.weight" in ps else z)
        n_i = z_i.shape[1]
        joint = T.concat(parts, axis=1)
        att = nn.mhsa(nn.layer_norm(joint, ps, "ln"), ps.scope("attn"), heads)
        a_i, a_ip1 = T.split(att, [n_i, joint.shape[1] - n_i], axis=1)
        out = []
        for name, z, a in (("lower", z_i, a_i), ("upper", z_ip1, a_ip1)):
            if f"{name}.up.weight" in ps:
                a = nn.linear(a, ps, f"{name}.up")
            out.append(z + a)
        return out[0], out[1]

    return mix


def feb_forward(f_i, f_ip1, ps, heads=1, mixer=None):
    """Returns enhanced (F'_i, F'_{i+1}) with the input shapes.

    ``mixer`` replaces the joint attention step; it receives and returns the
    two token sequences at their native widths.
    """
    if f_i.shape[0] != f_ip1.shape[0]:
        raise ConfigError("FEB inputs have different batch sizes")
    (_, _, h_i, w_i), (_, _, h_j, w_j) = f_i.shape, f_ip1.shape
    if mixer is None:
        mixer = _feb_mixer(ps, heads)
    z_i, z_ip1 = mixer(T.flatten_tokens(f_i), T.flatten_tokens(f_ip1))
    if z_i.shape != (f_i.shape[0], h_i * w_i, f_i.shape[1]) or \
            z_ip1.shape != (f_ip1.shape[0], h_j * w_j, f_ip1.shape[1]):
        raise ConfigError("FEB mixer changed token or channel counts")
    g_i = T.unflatten_tokens(z_i, h_i, w_i)
    g_ip1 = T.unflatten_tokens(z_ip1, h_j, w_j)
    return (nn.dwconv_block(g_i, ps.scope("lower.dwconv")),
            nn.dwconv_block(g_ip1, ps.scope("upper.dwconv")))


# ---------------------------------------------------------------------------
# FFB
# ---------------------------------------------------------------------------

def init_ffb(ps, d):
    nn.init_conv_bn_gelu(ps.scope("stage1"), 5 * d, 2 * d, separable=True)
    nn.init_conv_bn_gelu(ps.scope("stage2"), 6 * d, 2 * d, separable=True)


def _check_pair(f_c, f_t):
    d = f_t.shape[1]
    if f_c.shape[1] != 4 * d:
        raise ConfigError(
            f"CNN feature has {f_c.shape[1]} channels, expected 4 x {d} (mis-wired stagger pair?)")
    if f_c.shape[0] != f_t.shape[0] or f_c.shape[2:] != f_t.shape[2:]:
        raise ConfigError(f"FFB spatial mismatch: {f_c.shape} vs {f_t.shape}")
    return d


def ffb_forward(f_c, f_t, ps, training=True, channel_trace=None):
    """F1 = [F_C, F_T] (5d) -> F2 (2d) -> [F2, F_C] (6d) -> F_Fuse (2d)."""
    _check_pair(f_c, f_t)
    f1 = T.concat_channels([f_c, f_t])
    f2 = nn.conv_bn_gelu(f1, ps.scope("stage1"), training)
    f3 = T.concat_channels([f2, f_c])
    fused = nn.conv_bn_gelu(f3, ps.scope("stage2"), training)
    if channel_trace is not None:
        channel_trace.extend([f1.shape[1], f2.shape[1], f3.shape[1], fused.shape[1]])
    return fused


def init_plain_fusion(ps, d):
    nn.init_conv(ps, "proj", 5 * d, 2 * d, 1)


def plain_fusion(f_c, f_t, ps):
    """FFB-off ablation: concatenate and project to 2d with a 1x1 conv."""
    _check_pair(f_c, f_t)
    return nn.conv(T.concat_channels([f_c, f_t]), ps, "proj")


# ---------------------------------------------------------------------------
# GAB
# ---------------------------------------------------------------------------

def init_gab(ps, d_in1, d_in2):
    if d_in2 != d_in1:
        nn.init_linear(ps, "align", d_in2, d_in1)
    for name in ("wq", "wk", "wv"):
        ps.trunc_normal(name, (d_in1, d_in1))


def gab_core(t1, t2, ps, parts=None):
    """Two-layer attention on aligned (B, N, d) token sets."""
    if t1.shape != t2.shape:
        raise ConfigError(f"GAB token mismatch after alignment: {t1.shape} vs {t2.shape}")
    scale = 1.0 / math.sqrt(t1.shape[-1])
    a1 = T.softmax(T.matmul(t1, T.swap_last(t1)) * scale, axis=-1)
    a2 = T.softmax(T.matmul(t2, T.swap_last(t2)) * scale, axis=-1)
    f_sum = a1 + a2
    f1 = T.matmul(f_sum, t1) + t2
    f2 = T.matmul(f_sum, t2) + t1
    q = T.matmul(f1, ps["wq"])
    k = T.matmul(f2, ps["wk"])
    v = T.matmul(f2, ps["wv"])
    out = T.matmul(T.softmax(T.matmul(q, T.swap_last(k)) * scale, axis=-1), v)
    if parts is not None:
        parts.update(f_sum=f_sum, f1=f1, f2=f2)
    return out


def gab_forward(f_in1, f_in2, ps, parts=None):
    """GAB on (B, d1, H, W) and a coarser (B, d2, H/r, W/r) map; returns (B, d1, H, W)."""
    _, _, h1, w1 = f_in1.shape
    _, _, h2, w2 = f_in2.shape
    if h1 % h2 or w1 % w2 or h1 // h2 != w1 // w2:
        raise ConfigError(f"GAB cannot align {f_in2.shape} onto {f_in1.shape}")
    up = T.upsample_nearest(f_in2, h1 // h2)
    t2 = T.flatten_tokens(up)
    if "align.weight" in ps:
        t2 = nn.linear(t2, ps, "align")
    out = gab_core(T.flatten_tokens(f_in1), t2, ps, parts)
    return T.unflatten_tokens(out, h1, w1)


# ---------------------------------------------------------------------------
# stagger adapter
# ---------------------------------------------------------------------------

def init_stagger_adapter(ps, c_in, c_out, stride, spatial=True):
    if spatial:
        k = stride if stride > 1 else 3
        nn.init_conv(ps, "dw", c_in, c_in, k, groups=c_in)
    nn.init_conv(ps, "pw", c_in, c_out, 1)


def stagger_adapter(f_t, target_resolution, ps):
    """Strided depth-wise conv onto the target grid, then 1x1 conv to target width."""
    _, c, h, w = f_t.shape
    th, tw = target_resolution
    if th < 1 or tw < 1 or h % th or w % tw or h // th != w // tw:
        raise ConfigError(f"target grid {th}x{tw} does not divide {h}x{w}")
    stride = h // th
    if "dw.weight" in ps:
        k = ps["dw.weight"].shape[-1]
        f_t = nn.conv(f_t, ps, "dw", stride=stride, padding=(k - stride) // 2, groups=c)
    elif stride != 1:
        raise ConfigError("channel-only adapter cannot change resolution")
    return nn.conv(f_t, ps, "pw")
