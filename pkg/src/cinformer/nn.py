"""Parameter storage and the neural layers built on :mod:`cinformer.autodiff`.

Layers are plain functions of ``(input, params, path)``: parameters live in
a :class:`ParamStore` under dotted paths such as
``stem.stage1.block0.conv1.weight``.  Those paths are the checkpoint
contract, so they must not change for a given configuration.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

GROUPS = 8


class ParamStore:
    """Ordered map from dotted path to parameter tensor.

    Iteration is lexicographic by path.  A path flagged non-trainable is
    never touched by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, path: str, value, trainable: bool = True) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = path
        self._params[path] = t
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"no parameter at {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(p, self._params[p]) for p in self.paths()]

    def is_trainable(self, path: str) -> bool:
        return self._trainable[path]

    def set_trainable(self, path: str, flag: bool) -> None:
        self._trainable[path] = flag

    def freeze_prefix(self, *prefixes: str) -> None:
        for p in self._params:
            if p.startswith(prefixes):
                self._trainable[p] = False

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Copy with every parameter cast to ``dtype`` (fresh leaves)."""
        out = ParamStore()
        for p, t in self.items():
            out.add(p, Tensor(t.data.astype(dtype, copy=True)), self._trainable[p])
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for p, t in self.items():
            out.add(p, Tensor(t.data.copy()), self._trainable[p])
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self.items()}


# initialisation ------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    u = rng.uniform(math.prod(shape))
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)


def init_conv(store: ParamStore, rng, path: str, cin: int, cout: int, k: int, bias: bool = True):
    store.add(f"{path}.weight", kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
    if bias:
        store.add(f"{path}.bias", np.zeros(cout, np.float32))


def init_linear(store: ParamStore, rng, path: str, cin: int, cout: int, bias: bool = True):
    store.add(f"{path}.weight", kaiming_uniform(rng, (cin, cout), cin))
    if bias:
        store.add(f"{path}.bias", np.zeros(cout, np.float32))


def init_norm(store: ParamStore, path: str, channels: int):
    store.add(f"{path}.gamma", np.ones(channels, np.float32))
    store.add(f"{path}.beta", np.zeros(channels, np.float32))


# layers --------------------------------------------------------------------

def conv2d(x, params: ParamStore, path: str, stride: int = 1, padding: int | None = None) -> Tensor:
    w = params[f"{path}.weight"]
    b = params[f"{path}.bias"] if f"{path}.bias" in params else None
    if padding is None:
        padding = w.shape[-1] // 2
    h, wd = x.shape[-2:]
    if stride > 1 and (h % stride or wd % stride):
        raise DimensionError(f"{path}: input {h}x{wd} not divisible by stride {stride}")
    return ad.conv2d(x, w, b, stride=stride, padding=padding, name=path)


def linear(x, params: ParamStore, path: str) -> Tensor:
    w = params[f"{path}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{path}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    x = ad.as_tensor(x)
    if x.ndim == 1:
        y = ad.matmul(x.reshape(1, -1), w).reshape(-1)
    else:
        y = ad.matmul(x, w)
    if f"{path}.bias" in params:
        y = y + params[f"{path}.bias"]
    return y


def layernorm_affine(x, params: ParamStore, path: str, eps: float = 1e-5) -> Tensor:
    """Per-token standardisation over the last axis, then gamma/beta."""
    gamma, beta = params[f"{path}.gamma"], params[f"{path}.beta"]
    if gamma.shape[0] != x.shape[-1]:
        raise DimensionError(f"{path}: norm width {gamma.shape[0]} != channels {x.shape[-1]}")
    return ad.layernorm(x, axis=-1, eps=eps) * gamma + beta


def group_norm(x, params: ParamStore, path: str, groups: int = GROUPS, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"{path}: {c} channels not divisible into {groups} groups")
    y = ad.layernorm(x.reshape(b, groups, -1), axis=-1, eps=eps).reshape(b, c, h, w)
    gamma = params[f"{path}.gamma"].reshape(1, c, 1, 1)
    beta = params[f"{path}.beta"].reshape(1, c, 1, 1)
    return y * gamma + beta


def upsample2x(x, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        return ad.upsample_nearest(x, 2)
    if mode == "bilinear":
        return ad.upsample_bilinear(x, 2)
    raise ValueError(f"unknown upsample mode {mode!r}")


def init_basic_block(store: ParamStore, rng, path: str, cin: int, cout: int, stride: int):
    init_conv(store, rng, f"{path}.conv1", cin, cout, 3, bias=False)
    init_norm(store, f"{path}.norm1", cout)
    init_conv(store, rng, f"{path}.conv2", cout, cout, 3, bias=False)
    init_norm(store, f"{path}.norm2", cout)
    if stride != 1 or cin != cout:
        init_conv(store, rng, f"{path}.shortcut", cin, cout, 1, bias=False)
        init_norm(store, f"{path}.shortcut_norm", cout)


def residual_basic_block(x, params: ParamStore, path: str, stride: int = 1) -> Tensor:
    """ResNet basic block with GroupNorm: two 3x3 convs plus shortcut."""
    if stride not in (1, 2):
        raise ConfigError(f"{path}: stride must be 1 or 2, got {stride}")
    y = ad.relu(group_norm(conv2d(x, params, f"{path}.conv1", stride), params, f"{path}.norm1"))
    y = group_norm(conv2d(y, params, f"{path}.conv2"), params, f"{path}.norm2")
    if f"{path}.shortcut.weight" in params:
        short = group_norm(conv2d(x, params, f"{path}.shortcut", stride, padding=0),
                           params, f"{path}.shortcut_norm")
    else:
        short = x
    return ad.relu(y + short)


def tokens_to_image(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens do not form a {h}x{w} grid")
    return x.transpose(0, 2, 1).reshape(b, c, h, w)


def image_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)
