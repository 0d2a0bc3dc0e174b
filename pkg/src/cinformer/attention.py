"""Window multi-head attention and variance-ranked Top-K attention.

Top-K attention ranks the tokens and channels of Q by population variance,
attends with the selected query tokens/channels only, gates every key
column with a constraint vector derived from the mean score, and scatters
the result back.  Positions that were not selected get a zero update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError
from .nn import ParamStore, init_linear


class TokenMap(NamedTuple):
    """(B, N, C) token values on an H x W grid, N = H*W."""
    values: Tensor
    h: int
    w: int

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def check(self) -> "TokenMap":
        if self.values.shape[1] != self.h * self.w:
            raise DimensionError(f"token count {self.values.shape[1]} != {self.h}x{self.w}")
        return self


@dataclass
class TopKSelection:
    """Per-sample ranked indexes; index 0 is the highest-variance entry."""
    token_indexes: np.ndarray      # (B, k_tokens)
    channel_indexes: np.ndarray    # (B, k_channels)
    token_variances: np.ndarray    # (B, N)
    channel_variances: np.ndarray  # (B, C)


# float variances closer than this (relative to the mean square) may be equal
# in exact arithmetic; such near-ties are settled with rational arithmetic
_TIE_RTOL = 1e-9


def _exact_variance(values) -> Fraction:
    xs = [Fraction(float(x)) for x in values]
    n = len(xs)
    total = sum(xs)
    return (n * sum(x * x for x in xs) - total * total) / (n * n)


def _rank_desc(v: np.ndarray, k: int, stats: np.ndarray) -> np.ndarray:
    """Indexes of the ``k`` largest variances, ties broken toward the lower index.

    ``v`` is (B, M); ``stats`` is (B, M, L) holding the values each variance
    was computed from.  Ordering follows the exact variance of the float
    inputs, so rounding in ``v`` never decides between equal variances.
    """
    # stable sort on the negation: equal variances keep ascending index order
    order = np.argsort(-v, axis=-1, kind="stable")
    scale = (stats * stats).mean(axis=-1)
    for b in range(v.shape[0]):
        vs = v[b, order[b]]
        sc = scale[b, order[b]]
        near = (vs[:-1] - vs[1:]) <= _TIE_RTOL * np.maximum(sc[:-1], sc[1:])
        if not near[:k].any():
            continue
        cache = {}

        def exact(i):
            key = np.sort(stats[b, i]).tobytes()
            if key not in cache:
                cache[key] = _exact_variance(stats[b, i])
            return cache[key]

        row = order[b].tolist()
        start = 0
        while start < min(k, len(row)):
            end = start
            while end < len(near) and near[end]:
                end += 1
            if end > start:
                run = sorted(row[start:end + 1], key=lambda i: (-exact(i), i))
                row[start:end + 1] = run
            start = end + 1
        order[b] = row
    return order[..., :k]


def compute_selection(q, k_tokens: int, k_channels: int) -> TopKSelection:
    """Rank tokens (variance over channels) and channels (variance over tokens) of Q."""
    qd = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    if qd.ndim == 2:
        qd = qd[None]
    _, n, c = qd.shape
    if not 1 <= k_tokens <= n:
        raise ConfigError(f"k_tokens={k_tokens} outside [1, {n}]")
    if not 1 <= k_channels <= c:
        raise ConfigError(f"k_channels={k_channels} outside [1, {c}]")
    tok_dev = qd - qd.mean(axis=2, keepdims=True)
    tok_var = (tok_dev * tok_dev).mean(axis=2)
    ch_dev = qd - qd.mean(axis=1, keepdims=True)
    ch_var = (ch_dev * ch_dev).mean(axis=1)
    sel = TopKSelection(_rank_desc(tok_var, k_tokens, qd),
                        _rank_desc(ch_var, k_channels, qd.transpose(0, 2, 1)),
                        tok_var, ch_var)
    ad.log_branch(sel.token_indexes)
    ad.log_branch(sel.channel_indexes)
    return sel


# parameters ---------------------------------------------------------------

def init_topk_attention(store: ParamStore, rng, path: str, c: int):
    for name in ("wq", "wk", "wv", "wo"):
        init_linear(store, rng, f"{path}.{name}", c, c, bias=False)
    store.add(f"{path}.gamma", np.ones(1, np.float32))


def init_window_attention(store: ParamStore, rng, path: str, c: int):
    for name in ("wq", "wk", "wv"):
        init_linear(store, rng, f"{path}.{name}", c, c, bias=False)
    init_linear(store, rng, f"{path}.wo", c, c)


# Top-K ---------------------------------------------------------------------

def topk_attention(x: TokenMap, params: ParamStore, path: str, k_tokens: int, k_channels: int,
                   variant: str = "full-key", gate_override=None, trace: dict | None = None) -> TokenMap:
    """Additive update of the Top-K attention block (single head, global).

    ``gate_override`` replaces the constraint vector by a constant (a test
    hook; 1.0 recovers plain attention on the selection).
    """
    v = x.values
    b, n, c = v.shape
    q = ad.matmul(v, params[f"{path}.wq.weight"])
    k = ad.matmul(v, params[f"{path}.wk.weight"])
    val = ad.matmul(v, params[f"{path}.wv.weight"])
    sel = compute_selection(q, k_tokens, k_channels)
    tok, ch = sel.token_indexes, sel.channel_indexes
    q_sel = ad.gather(q, tok, ch)
    if variant == "full-key":
        k_sel, v_sel = ad.gather(k, None, ch), ad.gather(val, None, ch)
    elif variant == "selected-key":
        k_sel, v_sel = ad.gather(k, tok, ch), ad.gather(val, tok, ch)
    else:
        raise ConfigError(f"unknown Top-K variant {variant!r}")
    scores = ad.matmul(q_sel, k_sel.transpose(0, 2, 1)) * (1.0 / math.sqrt(c))
    attn = ad.softmax(scores, axis=-1)
    if not np.all(np.isfinite(attn.data)):
        raise NumericError(f"non-finite attention weights in {path}")
    if gate_override is None:
        gate = ad.sigmoid(ad.layernorm(ad.reduce_mean(scores, axis=1), axis=-1))
        gate = gate * params[f"{path}.gamma"]
    else:
        gate = ad.as_tensor(np.full((b, scores.shape[-1]), gate_override, dtype=v.dtype))
    z = ad.matmul(attn * gate.reshape(b, 1, -1), v_sel)
    update = ad.scatter_add(z, tok, ch, (b, n, c))
    out = ad.matmul(update, params[f"{path}.wo.weight"])
    if trace is not None:
        trace[path] = {"selection": sel, "attention": attn.data, "gate": gate.data}
    return TokenMap(out, x.h, x.w)


# windows -------------------------------------------------------------------

def window_partition(v: Tensor, h: int, w: int, ws: int) -> Tensor:
    b, _, c = v.shape
    if h % ws or w % ws:
        raise DimensionError(f"{h}x{w} token grid not divisible by window {ws}")
    x = v.reshape(b, h // ws, ws, w // ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // ws) * (w // ws), ws * ws, c)


def window_merge(x: Tensor, b: int, h: int, w: int, ws: int) -> Tensor:
    c = x.shape[-1]
    x = x.reshape(b, h // ws, w // ws, ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * w, c)


def window_attention(x: TokenMap, params: ParamStore, path: str, heads: int, window: int,
                     trace: dict | None = None) -> TokenMap:
    """Multi-head attention inside non-overlapping window x window patches."""
    v = x.values
    b, _, c = v.shape
    if c % heads:
        raise DimensionError(f"{path}: width {c} not divisible by {heads} heads")
    d = c // heads
    win = window_partition(v, x.h, x.w, window)
    bw, t, _ = win.shape

    def split(name):
        y = ad.matmul(win, params[f"{path}.{name}.weight"])
        return y.reshape(bw, t, heads, d).transpose(0, 2, 1, 3)

    q, k, val = split("wq"), split("wk"), split("wv")
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    if not np.all(np.isfinite(attn.data)):
        raise NumericError(f"non-finite attention weights in {path}")
    y = ad.matmul(attn, val).transpose(0, 2, 1, 3).reshape(bw, t, c)
    y = ad.matmul(y, params[f"{path}.wo.weight"]) + params[f"{path}.wo.bias"]
    if trace is not None:
        trace[path] = {"attention": attn.data}
    return TokenMap(window_merge(y, b, x.h, x.w, window), x.h, x.w)


def dense_attention(x: TokenMap, params: ParamStore, path: str, heads: int,
                    trace: dict | None = None) -> TokenMap:
    """Global multi-head attention: one window covering the whole grid."""
    if x.h != x.w:
        raise DimensionError(f"{path}: dense attention expects a square grid")
    return window_attention(x, params, path, heads, x.h, trace)


# cost model ----------------------------------------------------------------

def flops_of_attention(kind: str, n: int, c: int, h: int = 1, w: int | None = None,
                       k_t: int | None = None, k_c: int | None = None) -> int:
    """Analytic FLOPs of one attention call; a multiply-add counts as 2.

    ``dense``: 4 projections + QK^T + AV over all N tokens.
    ``window``: the same per window of ``w*w`` tokens.
    ``topk`` / ``topk-selected``: Q/K/V projections, the selected score and
    aggregation products, the output projection, and one 2NC pass each for
    the token and channel variances.  Heads do not change the count.
    """
    proj = 2 * n * c * c
    if kind == "dense":
        return 4 * proj + 2 * n * n * c + 2 * n * n * c
    if kind == "window":
        if w is None or w * w > n:
            raise DimensionError("window kind needs a window no larger than the grid")
        t = w * w
        return 4 * proj + 2 * (n // t) * (2 * t * t * c)
    if kind in ("topk", "topk-full", "full-key", "topk-selected", "selected-key"):
        if k_t is None or k_c is None or not (1 <= k_t <= n and 1 <= k_c <= c):
            raise ConfigError(f"invalid Top-K sizes k_t={k_t}, k_c={k_c} for N={n}, C={c}")
        keys = k_t if kind in ("topk-selected", "selected-key") else n
        return 3 * proj + 2 * k_t * keys * k_c + 2 * k_t * keys * k_c + proj + 2 * (2 * n * c)
    raise ValueError(f"unknown attention kind {kind!r}")
