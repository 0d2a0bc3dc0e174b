"""UNet-style decoder over the encoder skips and the segmentation head."""
from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderOutputs
from .nn import ParamStore, conv2d, group_norm, init_conv, init_norm, tokens_to_image

HEAD_UPSAMPLE = 4


def init_decoder(store: ParamStore, rng, stage_widths, num_classes: int):
    for i in (3, 2, 1):
        cin = stage_widths[i] + stage_widths[i - 1]
        cout = stage_widths[i - 1]
        path = f"decoder.stage{i}"
        init_conv(store, rng, f"{path}.conv1", cin, cout, 3, bias=False)
        init_norm(store, f"{path}.norm1", cout)
        init_conv(store, rng, f"{path}.conv2", cout, cout, 3, bias=False)
        init_norm(store, f"{path}.norm2", cout)
    init_conv(store, rng, "decoder.head", stage_widths[0], num_classes, 1)


def _conv_block(x, params, path):
    x = ad.relu(group_norm(conv2d(x, params, f"{path}.conv1"), params, f"{path}.norm1"))
    return ad.relu(group_norm(conv2d(x, params, f"{path}.conv2"), params, f"{path}.norm2"))


def _as_image(s) -> Tensor:
    return tokens_to_image(s.values, s.h, s.w)


def decoder_forward(enc: EncoderOutputs, params: ParamStore) -> Tensor:
    """Per-pixel logits (B, num_classes, H, W) at the network input resolution."""
    d = _as_image(enc.s4)
    for i in (3, 2, 1):
        skip = _as_image(enc[i - 1])
        d = _conv_block(ad.concat([ad.upsample_bilinear(d, 2), skip], axis=1), params,
                        f"decoder.stage{i}")
    logits = conv2d(d, params, "decoder.head")
    return ad.upsample_bilinear(logits, HEAD_UPSAMPLE)
