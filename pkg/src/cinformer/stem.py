"""Residual CNN stem and FPN top-down path producing the injected pyramid."""
from __future__ import annotations

from typing import NamedTuple

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import (ParamStore, conv2d, group_norm, init_basic_block, init_conv, init_norm,
                 residual_basic_block, upsample2x)

BLOCKS_PER_STAGE = 2


class FeaturePyramid(NamedTuple):
    """R1..R4 at strides 4/8/16/32, all with the common FPN width."""
    r1: Tensor
    r2: Tensor
    r3: Tensor
    r4: Tensor


def init_stem(store: ParamStore, rng, stem_widths, fpn_width: int, in_channels: int = 3):
    init_conv(store, rng, "stem.conv", in_channels, stem_widths[0], 3, bias=False)
    init_norm(store, "stem.norm", stem_widths[0])
    cin = stem_widths[0]
    for s, cout in enumerate(stem_widths, start=1):
        for j in range(BLOCKS_PER_STAGE):
            init_basic_block(store, rng, f"stem.stage{s}.block{j}", cin if j == 0 else cout, cout,
                             2 if j == 0 else 1)
        cin = cout
    for i, c in enumerate(stem_widths, start=1):
        init_conv(store, rng, f"fpn.lat{i}", c, fpn_width, 1)
        init_conv(store, rng, f"fpn.out{i}", fpn_width if i == 4 else 2 * fpn_width, fpn_width, 3)


def backbone_forward(image: Tensor, params: ParamStore) -> tuple[Tensor, ...]:
    """Stem conv (stride 2) then four stages of two basic blocks, each stage stride 2."""
    _, _, h, w = image.shape
    if h % 32 or w % 32:
        raise DimensionError(f"backbone input {h}x{w} is not divisible by 32")
    x = ad.relu(group_norm(conv2d(image, params, "stem.conv", stride=2), params, "stem.norm"))
    feats = []
    for s in range(1, 5):
        for j in range(BLOCKS_PER_STAGE):
            x = residual_basic_block(x, params, f"stem.stage{s}.block{j}", 2 if j == 0 else 1)
        feats.append(x)
    return tuple(feats)


def fpn_topdown(feats, params: ParamStore) -> FeaturePyramid:
    """R4 = out4(lat4(B4)); Ri = outi(concat(up(R(i+1)), lati(Bi)))."""
    r = conv2d(conv2d(feats[3], params, "fpn.lat4"), params, "fpn.out4")
    out = [r]
    for i in (3, 2, 1):
        lat = conv2d(feats[i - 1], params, f"fpn.lat{i}")
        up = upsample2x(r, "nearest")
        if up.shape[-2:] != lat.shape[-2:]:
            raise DimensionError(f"fpn level {i}: upsampled {up.shape} vs lateral {lat.shape}")
        r = conv2d(ad.concat([up, lat], axis=1), params, f"fpn.out{i}")
        out.append(r)
    return FeaturePyramid(out[3], out[2], out[1], out[0])


def stem_forward(image: Tensor, params: ParamStore) -> FeaturePyramid:
    return fpn_topdown(backbone_forward(image, params), params)
