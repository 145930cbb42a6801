"""SNet assembly: parallel CNN/ViT encoders, stagger fusion, recovery decoder.

Stage channel schedule for base width ``c``: CNN ``[4c, 8c, 16c, 32c]`` and
ViT ``[c, 2c, 4c, 8c]``, both at ``H/4 .. H/32``.  Stagger mode fuses
(CNN 3, ViT 1) and (CNN 4, ViT 2); unstagger mode fuses (3, 3) and (4, 4).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import fusion, nn
from . import tensor as T
from .errors import ConfigError, UsageError
from .formats import blob_text, text_blob
from .kvconfig import parse_bool, parse_kv
from .fusion import FusionPair

STAGES = 4
ABLATION_FLAGS = ("feb", "ffb", "gab", "stagger")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple = (64, 64)
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 8
    fusion_mode: str = "stagger"
    enable_feb: bool = True
    enable_ffb: bool = True
    enable_gab: bool = True
    feb_heads: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError(f"input size {h}x{w} must be positive multiples of 32")
        if self.in_channels < 1 or self.num_classes < 2 or self.base_width < 1:
            raise ConfigError("in_channels >= 1, num_classes >= 2, base_width >= 1 required")
        if self.fusion_mode not in ("stagger", "unstagger"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for a, b in zip(self.cnn_channels, self.vit_channels):
            if a != 4 * b:
                raise ConfigError("CNN stage width must be 4x the ViT stage width")

    @property
    def cnn_channels(self):
        c = self.base_width
        return [4 * c, 8 * c, 16 * c, 32 * c]

    @property
    def vit_channels(self):
        c = self.base_width
        return [c, 2 * c, 4 * c, 8 * c]

    def resolution(self, stage):
        h, w = self.input_size
        return h // 2 ** (stage + 2), w // 2 ** (stage + 2)

    @property
    def fusion_pairs(self):
        if self.fusion_mode == "stagger":
            return [FusionPair(3, 1), FusionPair(4, 2)]
        return [FusionPair(3, 3, staggered=False), FusionPair(4, 4, staggered=False)]

    @property
    def uses_feb(self):
        # FEB outputs only feed the staggered pairs.
        return self.enable_feb and self.fusion_mode == "stagger"

    @property
    def vit_stages(self):
        # Without GAB a stagger model consumes ViT stages 1-3 only; building
        # stage 4 would leave parameters with no gradient.
        return STAGES if self.enable_gab or self.fusion_mode == "unstagger" else STAGES - 1

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values):
        kwargs = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in names:
                continue
            default = names[key].default
            try:
                if isinstance(default, bool):
                    kwargs[key] = parse_bool(raw)
                elif isinstance(default, tuple):
                    parts = [int(p) for p in str(raw).replace("x", ",").split(",") if p.strip()]
                    kwargs[key] = tuple(parts * 2 if len(parts) == 1 else parts)
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = str(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_kv(text))


def ablate(config, flags):
    """Disable the named components; ``stagger`` switches to unstagger fusion."""
    flags = set(flags)
    unknown = flags - set(ABLATION_FLAGS)
    if unknown:
        raise UsageError(f"unknown ablation flags {sorted(unknown)}; valid: {ABLATION_FLAGS}")
    changes = {}
    if "feb" in flags:
        changes["enable_feb"] = False
    if "ffb" in flags:
        changes["enable_ffb"] = False
    if "gab" in flags:
        changes["enable_gab"] = False
    if "stagger" in flags:
        changes["fusion_mode"] = "unstagger"
    return dataclasses.replace(config, **changes)


class SNet:
    def __init__(self, config: NetworkConfig, params: nn.ParamSet):
        self.config = config
        self.params = params

    @property
    def parameter_count(self):
        return self.params.count()

    @property
    def fusion_pairs(self):
        return self.config.fusion_pairs

    def state(self):
        state = dict(self.params.state())
        state["meta/config"] = text_blob(self.config.to_text())
        state["meta/init_seed"] = np.array([self.params.init_seed], dtype=np.uint32)
        return state

    @classmethod
    def from_state(cls, state):
        try:
            config = NetworkConfig.from_text(blob_text(state["meta/config"]))
            seed = int(state["meta/init_seed"][0])
        except KeyError as exc:
            raise ConfigError(f"checkpoint missing {exc.args[0]}") from exc
        model = build(config, seed)
        model.params.load_state(state)
        return model


def build(config: NetworkConfig, seed=0) -> SNet:
    ps = nn.ParamSet(seed, dtype=np.dtype(config.dtype))
    c = config.base_width
    cnn, vit = config.cnn_channels, config.vit_channels

    # full-resolution shallow path used by the final head
    nn.init_conv_bn_gelu(ps.scope("shallow"), config.in_channels, c)

    # CNN branch
    nn.init_conv(ps, "cnn.stem.conv", config.in_channels, cnn[0], 4, bias=False)
    nn.init_norm(ps, "cnn.stem.bn", cnn[0])
    nn.init_conv_bn_gelu(ps.scope("cnn.stage1.b"), cnn[0], cnn[0])
    for i in range(1, STAGES):
        nn.init_conv_bn_gelu(ps.scope(f"cnn.stage{i + 1}.a"), cnn[i - 1], cnn[i])
        nn.init_conv_bn_gelu(ps.scope(f"cnn.stage{i + 1}.b"), cnn[i], cnn[i])

    # ViT branch
    for i in range(config.vit_stages):
        s = ps.scope(f"vit.stage{i + 1}")
        cin = config.in_channels if i == 0 else vit[i - 1]
        spec = nn.StageSpec(cin, vit[i], 2 ** (i + 2), "vit")
        spec.check_input(config.input_size[0])
        nn.init_patch_embed(s.scope("embed"), spec, 4 if i == 0 else 2)
        h, w = config.resolution(i)
        s.trunc_normal("pos", (1, vit[i], h, w))
        nn.init_vit_block(s.scope("block"), vit[i], nn.default_heads(vit[i]))

    if config.uses_feb:
        fusion.init_feb(ps.scope("feb"), vit[0], vit[1], config.feb_heads)

    # stagger module
    for tag, pair in zip("AB", config.fusion_pairs):
        ci, vj = pair.cnn_stage - 1, pair.vit_stage - 1
        d = cnn[ci] // 4
        stride = 2 ** (ci - vj)
        fusion.init_stagger_adapter(ps.scope(f"adapter{tag}"), vit[vj], d, stride,
                                    spatial=pair.staggered)
        if config.enable_ffb:
            fusion.init_ffb(ps.scope(f"ffb{tag}"), d)
        else:
            fusion.init_plain_fusion(ps.scope(f"fuse{tag}"), d)

    if config.enable_gab:
        fusion.init_gab(ps.scope("gab"), vit[2], vit[3])

    # information recovery decoder
    nn.init_upsample_block(ps.scope("dec3"), 16 * c, 8 * c + 4 * c)
    nn.init_upsample_block(ps.scope("dec2"), 8 * c, cnn[1])
    nn.init_upsample_block(ps.scope("dec1"), 4 * c, cnn[0])
    nn.init_conv_bn_gelu(ps.scope("refine"), 2 * c + c, c)
    nn.init_conv(ps, "head", c, config.num_classes, 1)
    nn.init_conv(ps, "ds_head", 16 * c + 8 * c, config.num_classes, 1)
    return SNet(config, ps)


def _cnn_branch(x, ps, training):
    feats = []
    h = T.conv2d(x, ps["cnn.stem.conv.weight"], stride=4)
    h = T.gelu(nn.norm(h, ps, "cnn.stem.bn", training))
    h = nn.conv_bn_gelu(h, ps.scope("cnn.stage1.b"), training)
    feats.append(h)
    for i in range(2, STAGES + 1):
        h = nn.conv_bn_gelu(h, ps.scope(f"cnn.stage{i}.a"), training, stride=2)
        h = nn.conv_bn_gelu(h, ps.scope(f"cnn.stage{i}.b"), training)
        feats.append(h)
    return feats


def _vit_branch(x, ps, config):
    feats = []
    h = x
    for i in range(config.vit_stages):
        s = ps.scope(f"vit.stage{i + 1}")
        h = nn.patch_embed(h, s.scope("embed"), 4 if i == 0 else 2) + s["pos"]
        _, ch, hh, ww = h.shape
        tokens = nn.vit_block(T.flatten_tokens(h), s.scope("block"), nn.default_heads(ch))
        h = T.unflatten_tokens(tokens, hh, ww)
        feats.append(h)
    return feats


def forward(model: SNet, images, training=False, trace=False):
    """Returns ``(y_hat, y_hat_f, trace_dict_or_None)``; logits are (B, K, H, W)."""
    config, ps = model.config, model.params
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    if x.dtype != ps.dtype:
        x = T.Tensor(x.data.astype(ps.dtype))
    if x.ndim != 4 or x.shape[1] != config.in_channels or x.shape[2:] != config.input_size:
        raise ConfigError(
            f"expected images (B, {config.in_channels}, {config.input_size[0]}, "
            f"{config.input_size[1]}), got {x.shape}")
    rec = {} if trace else None

    cnn = _cnn_branch(x, ps, training)
    vit = _vit_branch(x, ps, config)
    vit_used = list(vit)
    if config.uses_feb:
        vit_used[0], vit_used[1] = fusion.feb_forward(vit[0], vit[1], ps.scope("feb"),
                                                      config.feb_heads)

    fused = []
    for tag, pair in zip("AB", config.fusion_pairs):
        f_c = cnn[pair.cnn_stage - 1]
        f_t = fusion.stagger_adapter(vit_used[pair.vit_stage - 1], f_c.shape[2:],
                                     ps.scope(f"adapter{tag}"))
        if config.enable_ffb:
            fused.append(fusion.ffb_forward(f_c, f_t, ps.scope(f"ffb{tag}"), training))
        else:
            fused.append(fusion.plain_fusion(f_c, f_t, ps.scope(f"fuse{tag}")))
    ffb_a, ffb_b = fused

    if config.enable_gab:
        recovered = fusion.gab_forward(vit[2], vit[3], ps.scope("gab"))
    else:
        recovered = vit[2]

    d3 = nn.upsample_block(ffb_b, T.concat_channels([ffb_a, recovered]), ps.scope("dec3"),
                           training)
    d2 = nn.upsample_block(d3, cnn[1], ps.scope("dec2"), training)
    d1 = nn.upsample_block(d2, cnn[0], ps.scope("dec1"), training)
    shallow = nn.conv_bn_gelu(x, ps.scope("shallow"), training)
    full = T.concat_channels([T.upsample_nearest(d1, 4), shallow])
    y_hat = nn.conv(nn.conv_bn_gelu(full, ps.scope("refine"), training), ps, "head")

    # Nearest up-sampling commutes with concatenation and 1x1 convs, so the
    # deep-supervision head runs at H/16 and is up-sampled afterwards.
    ds = nn.conv(T.concat_channels([T.upsample_nearest(ffb_b, 2), ffb_a]), ps, "ds_head")
    y_hat_f = T.upsample_nearest(ds, config.input_size[0] // ds.shape[2])

    if rec is not None:
        for i in range(STAGES):
            rec[f"cnn{i + 1}"] = cnn[i]
        for i, f in enumerate(vit):
            rec[f"vit{i + 1}"] = f
        if config.uses_feb:
            rec["feb1"], rec["feb2"] = vit_used[0], vit_used[1]
        rec.update(fusedA=ffb_a, fusedB=ffb_b, recovered=recovered, dec3=d3, dec2=d2, dec1=d1)
    return y_hat, y_hat_f, rec


def forward_unstagger(model: SNet, images, training=False, trace=False):
    """Forward for a model built with ``fusion_mode='unstagger'``."""
    if model.config.fusion_mode != "unstagger":
        raise ConfigError("model was built for stagger fusion; use ablate(config, {'stagger'})")
    return forward(model, images, training, trace)
