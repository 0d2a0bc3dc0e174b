"""Four-stage transformer encoder fed by R1 and injected with R2..R4."""
from __future__ import annotations

from typing import NamedTuple

from . import autodiff as ad
from .attention import (TokenMap, dense_attention, init_topk_attention, init_window_attention,
                        topk_attention, window_attention)
from .config import ModelConfig
from .errors import DimensionError
from .nn import (ParamStore, conv2d, image_to_tokens, init_conv, init_linear, init_norm,
                 layernorm_affine, linear)
from .stem import FeaturePyramid

MLP_RATIO = 4


class EncoderOutputs(NamedTuple):
    s1: TokenMap
    s2: TokenMap
    s3: TokenMap
    s4: TokenMap


def init_encoder(store: ParamStore, rng, cfg: ModelConfig):
    widths, cf = cfg.stage_widths, cfg.fpn_width
    init_linear(store, rng, "encoder.embed", cf, widths[0])
    for i in range(4):
        stage = f"encoder.stage{i + 1}"
        c = widths[i]
        if i > 0:
            init_norm(store, f"{stage}.merge.norm", 4 * widths[i - 1])
            init_linear(store, rng, f"{stage}.merge.reduction", 4 * widths[i - 1], c, bias=False)
            if cfg.inject:
                init_conv(store, rng, f"{stage}.inject.conv", cf, cf, 1)
                init_linear(store, rng, f"{stage}.inject.linear", c + cf, c)
        for j in range(cfg.stage_depths[i]):
            init_block(store, rng, f"{stage}.block{j}", c, cfg.attention.kinds[i])


def init_block(store: ParamStore, rng, path: str, c: int, kind: str):
    init_norm(store, f"{path}.norm1", c)
    if kind == "topk":
        init_topk_attention(store, rng, f"{path}.attn", c)
    else:
        init_window_attention(store, rng, f"{path}.attn", c)
    init_norm(store, f"{path}.norm2", c)
    init_linear(store, rng, f"{path}.mlp.fc1", c, MLP_RATIO * c)
    init_linear(store, rng, f"{path}.mlp.fc2", MLP_RATIO * c, c)


def inject(s_prev: TokenMap, r_i, params: ParamStore, path: str) -> TokenMap:
    """Y = Linear(Concat(S, Reshape(Conv1x1(R)))): one-way CNN -> transformer fusion."""
    if r_i.shape[-2:] != (s_prev.h, s_prev.w):
        raise DimensionError(f"{path}: CNN feature {tuple(r_i.shape)} does not match "
                             f"token grid {s_prev.h}x{s_prev.w} of {tuple(s_prev.values.shape)}")
    r = image_to_tokens(conv2d(r_i, params, f"{path}.conv"))
    y = linear(ad.concat([s_prev.values, r], axis=-1), params, f"{path}.linear")
    return TokenMap(y, s_prev.h, s_prev.w)


def patch_merge(s: TokenMap, params: ParamStore, path: str) -> TokenMap:
    """Concatenate each 2x2 neighbourhood (4C), normalise, project to 2C."""
    if s.h % 2 or s.w % 2:
        raise DimensionError(f"{path}: cannot merge odd token grid {s.h}x{s.w}")
    b, _, c = s.values.shape
    h2, w2 = s.h // 2, s.w // 2
    x = s.values.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 4, 2, 5).reshape(b, h2 * w2, 4 * c)
    x = linear(layernorm_affine(x, params, f"{path}.norm"), params, f"{path}.reduction")
    return TokenMap(x, h2, w2)


def attention_update(x: TokenMap, params: ParamStore, path: str, kind: str, cfg: ModelConfig,
                     stage: int, trace=None) -> TokenMap:
    a = cfg.attention
    if kind == "topk":
        kt, kc = cfg.k_for_stage(stage)
        return topk_attention(x, params, path, kt, kc, a.topk_variant, trace=trace)
    if kind == "dense":
        return dense_attention(x, params, path, a.heads, trace=trace)
    return window_attention(x, params, path, a.heads, cfg.window_for_stage(stage), trace=trace)


def transformer_block(x: TokenMap, params: ParamStore, path: str, kind: str, cfg: ModelConfig,
                      stage: int, trace=None) -> TokenMap:
    """Pre-norm residual block: attention then a GELU MLP."""
    v = x.values
    normed = TokenMap(layernorm_affine(v, params, f"{path}.norm1"), x.h, x.w)
    v = v + attention_update(normed, params, f"{path}.attn", kind, cfg, stage, trace).values
    hidden = ad.gelu(linear(layernorm_affine(v, params, f"{path}.norm2"), params, f"{path}.mlp.fc1"))
    v = v + linear(hidden, params, f"{path}.mlp.fc2")
    return TokenMap(v, x.h, x.w)


def encoder_forward(pyramid: FeaturePyramid, params: ParamStore, cfg: ModelConfig,
                    trace: dict | None = None) -> EncoderOutputs:
    r1 = pyramid.r1
    _, _, h, w = r1.shape
    s = TokenMap(linear(image_to_tokens(r1), params, "encoder.embed"), h, w)
    outs = []
    for i in range(4):
        stage = f"encoder.stage{i + 1}"
        if i > 0:
            s = patch_merge(s, params, f"{stage}.merge")
            if cfg.inject:
                s = inject(s, pyramid[i], params, f"{stage}.inject")
        for j in range(cfg.stage_depths[i]):
            s = transformer_block(s, params, f"{stage}.block{j}", cfg.attention.kinds[i], cfg, i, trace)
        outs.append(s)
        if trace is not None:
            trace[stage] = s
    return EncoderOutputs(*outs)
