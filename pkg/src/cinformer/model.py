"""The assembled network: stem + FPN, injected encoder, decoder."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .config import Config, ModelConfig
from .decoder import decoder_forward, init_decoder
from .encoder import encoder_forward, init_encoder
from .errors import DimensionError
from .nn import ParamStore
from .rng import SeededRng
from .stem import init_stem, stem_forward

# fixed substream keys so each component's draws are independent of the others
_STREAM_STEM, _STREAM_ENCODER, _STREAM_DECODER = 1, 2, 3


def init_params(config: Config | ModelConfig, rng: SeededRng | int) -> ParamStore:
    """Fresh parameters, fully determined by the seed."""
    cfg = config.model if isinstance(config, Config) else config
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    store = ParamStore()
    init_stem(store, rng.derive(_STREAM_STEM), cfg.stem_widths, cfg.fpn_width)
    init_encoder(store, rng.derive(_STREAM_ENCODER), cfg)
    init_decoder(store, rng.derive(_STREAM_DECODER), cfg.stage_widths, cfg.num_classes)
    if cfg.freeze_stem:
        store.freeze_prefix("stem.", "fpn.")
    return store


def forward(params: ParamStore, images, config: Config | ModelConfig, trace: dict | None = None) -> Tensor:
    """Logits (B, num_classes, H, W) for images (B, 3, H, W)."""
    cfg = config.model if isinstance(config, Config) else config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected (B, 3, H, W) images, got {x.shape}")
    pyramid = stem_forward(x, params)
    if trace is not None:
        trace["pyramid"] = pyramid
    enc = encoder_forward(pyramid, params, cfg, trace)
    return decoder_forward(enc, params)


def predict(params: ParamStore, images, config) -> np.ndarray:
    with no_grad():
        logits = forward(params, images, config)
    return np.argmax(logits.data, axis=1)
