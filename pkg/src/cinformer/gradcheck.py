"""Central finite-difference verification of every differentiable op.

Each case builds a small graph in 64-bit, contracts its output with a fixed
random tensor to get a scalar, and compares the backward pass against
``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate.  The error of one
coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor / tol)``,
so a case passes when every coordinate is within ``tol`` relatively or
within ``floor`` absolutely.

The checked functions are only piecewise smooth.  When ``x + h`` and
``x - h`` fall on different pieces the central difference measures the
kink rather than the derivative, so that coordinate is re-evaluated with a
smaller step; the number of such coordinates is reported as ``refined``.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import TokenMap, init_topk_attention, init_window_attention, topk_attention, window_attention
from .autodiff import Tensor, no_grad
from .config import micro_config
from .encoder import init_block, inject, patch_merge, transformer_block
from .model import forward, init_params
from .nn import (ParamStore, group_norm, init_basic_block, init_conv, init_linear, init_norm,
                 layernorm_affine, linear, residual_basic_block)
from .rng import SeededRng

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-4
ABS_FLOOR = 1e-6
# a stencil that straddles a kink (relu sign flip, changed argmax or Top-K
# selection) is retried with step/10, at most this many times
REFINE_LEVELS = 3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    coords: int
    passed: bool
    refined: int = 0
    seconds: float = 0.0


def _corrupt(out: Tensor) -> None:
    rule = out._backward
    if rule is not None:
        out._backward = lambda g: rule(g * 1.5)


def check_gradients(fn, inputs: dict, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL,
                    floor: float = ABS_FLOOR, max_coords: int | None = None, seed: int = 0,
                    params: ParamStore | None = None, param_coords: int = 2,
                    corrupt: bool = False, name: str = "case") -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(fn(...) * R)``.

    ``inputs`` maps names to float64 arrays passed to ``fn`` as tensors (in
    order); ``params`` (if given) is passed last and ``param_coords`` random
    coordinates of each of its tensors are checked as well.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in inputs.items()}
    weight = None

    def run(grad: bool):
        nonlocal weight
        leaves = [Tensor(a, requires_grad=grad) for a in arrays.values()]
        args = leaves + ([params] if params is not None else [])
        out = fn(*args)
        if weight is None:
            weight = rng.standard_normal(out.shape)
        if grad and corrupt:
            _corrupt(out)
        loss = ad.reduce_sum(out * weight)
        return leaves, loss

    if params is not None:
        params.zero_grad()
    leaves, loss = run(True)
    loss.backward()
    targets = []
    for leaf, (key, arr) in zip(leaves, arrays.items()):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        flat = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat = rng.choice(arr.size, max_coords, replace=False)
        targets.extend((arr, int(i), grad.reshape(-1)[int(i)]) for i in flat)
    if params is not None:
        for _, t in params.items():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            picks = rng.choice(t.size, min(param_coords, t.size), replace=False)
            targets.extend((t.data, int(i), grad.reshape(-1)[int(i)]) for i in picks)

    def value():
        with no_grad(), ad.record_branches() as branches:
            return float(run(False)[1].data), branches

    def same_piece(a, b):
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))

    worst, refined = 0.0, 0
    for arr, i, analytic in targets:
        view = arr.reshape(-1)
        orig = view[i]
        step = eps
        for _ in range(REFINE_LEVELS + 1):
            view[i] = orig + step
            plus, bp = value()
            view[i] = orig - step
            minus, bm = value()
            view[i] = orig
            if same_piece(bp, bm):
                break
            step /= 10
        if step != eps:
            refined += 1
        numeric = (plus - minus) / (2 * step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor / tol)
        worst = max(worst, err)
    return CheckResult(name, worst, len(targets), worst < tol, refined, time.perf_counter() - t0)


# case builders --------------------------------------------------------------

def _store(builder, seed: int) -> ParamStore:
    store = ParamStore()
    builder(store, SeededRng(seed))
    out = store.astype(np.float64)
    # perturb norms and biases off their neutral init so their gradients matter
    r = np.random.default_rng(seed)
    for p, t in out.items():
        if p.endswith((".gamma", ".beta", ".bias")):
            t.data += 0.3 * r.standard_normal(t.shape)
    return out


def _away_from_zero(r, shape, margin=0.1):
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def op_cases(seed: int = 0) -> list:
    """(name, fn, inputs, extra kwargs) tuples covering every differentiable op."""
    r = np.random.default_rng(seed)
    n = lambda *s: r.standard_normal(s)
    pos = lambda *s: r.uniform(0.5, 2.0, s)
    tok = np.stack([r.permutation(6)[:3] for _ in range(2)])
    chn = np.stack([r.permutation(5)[:2] for _ in range(2)])
    cases = [
        ("matmul", ad.matmul, {"a": n(2, 3, 4), "b": n(4, 5)}, {}),
        ("add", ad.add, {"a": n(3, 4), "b": n(4)}, {}),
        ("sub", ad.sub, {"a": n(3, 4), "b": n(3, 1)}, {}),
        ("mul", ad.mul, {"a": n(3, 4), "b": n(3, 4)}, {}),
        ("div", ad.div, {"a": n(3, 4), "b": pos(3, 4)}, {}),
        ("neg", ad.neg, {"a": n(3, 4)}, {}),
        ("exp", ad.exp, {"a": n(3, 4)}, {}),
        ("log", ad.log, {"a": pos(3, 4)}, {}),
        ("sqrt", ad.sqrt, {"a": pos(3, 4)}, {}),
        ("relu", ad.relu, {"a": _away_from_zero(r, (3, 4))}, {}),
        ("gelu", ad.gelu, {"a": 2 * n(3, 4)}, {}),
        ("sigmoid", ad.sigmoid, {"a": 2 * n(3, 4)}, {}),
        ("sum", lambda a: ad.reduce_sum(a, 1), {"a": n(3, 4)}, {}),
        ("mean", lambda a: ad.reduce_mean(a, 0), {"a": n(3, 4)}, {}),
        ("max", lambda a: ad.reduce_max(a, 1), {"a": np.arange(12.0).reshape(3, 4)[:, r.permutation(4)]}, {}),
        ("variance", lambda a: ad.variance(a, -1), {"a": n(3, 5)}, {}),
        ("softmax", lambda a: ad.softmax(a, -1), {"a": n(3, 5)}, {}),
        ("layernorm", lambda a: ad.layernorm(a, -1), {"a": n(3, 6)}, {}),
        ("gather", lambda a: ad.gather(a, tok, chn), {"a": n(2, 6, 5)}, {}),
        ("scatter_add", lambda a: ad.scatter_add(a, tok, chn, (2, 6, 5)), {"a": n(2, 3, 2)}, {}),
        ("reshape_transpose", lambda a: a.reshape(2, 3, 4).transpose(2, 0, 1), {"a": n(6, 4)}, {}),
        ("concat", lambda a, b: ad.concat([a, b], 1), {"a": n(2, 3), "b": n(2, 2)}, {}),
        ("conv2d_3x3", lambda x, w, b: ad.conv2d(x, w, b, 1, 1), {"x": n(2, 3, 5, 5), "w": n(4, 3, 3, 3), "b": n(4)}, {}),
        ("conv2d_stride2", lambda x, w: ad.conv2d(x, w, None, 2, 1), {"x": n(1, 2, 6, 6), "w": n(3, 2, 3, 3)}, {}),
        ("conv2d_1x1", lambda x, w, b: ad.conv2d(x, w, b, 1, 0), {"x": n(2, 3, 4, 4), "w": n(2, 3, 1, 1), "b": n(2)}, {}),
        ("upsample_nearest", lambda x: ad.upsample_nearest(x, 2), {"x": n(1, 2, 3, 3)}, {}),
        ("upsample_bilinear", lambda x: ad.upsample_bilinear(x, 2), {"x": n(1, 2, 3, 4)}, {}),
        ("upsample_bilinear_x4", lambda x: ad.upsample_bilinear(x, 4), {"x": n(1, 1, 3, 3)}, {}),
    ]
    return cases


def layer_cases(seed: int = 0) -> list:
    r = np.random.default_rng(seed + 1)
    n = lambda *s: r.standard_normal(s)
    mcfg = micro_config().model
    lin = _store(lambda s, g: init_linear(s, g, "fc", 6, 4), seed)
    ln = _store(lambda s, g: init_norm(s, "ln", 6), seed)
    gn = _store(lambda s, g: init_norm(s, "gn", 16), seed)
    block = _store(lambda s, g: init_basic_block(s, g, "blk", 8, 8, 2), seed)
    topk = _store(lambda s, g: init_topk_attention(s, g, "attn", 8), seed)
    win = _store(lambda s, g: init_window_attention(s, g, "attn", 8), seed)
    merge = _store(lambda s, g: (init_norm(s, "m.norm", 16), init_linear(s, g, "m.reduction", 16, 8, bias=False)), seed)
    inj = _store(lambda s, g: (init_conv(s, g, "inj.conv", 4, 4, 1), init_linear(s, g, "inj.linear", 8 + 4, 8)), seed)
    tb_win = _store(lambda s, g: init_block(s, g, "tb", 8, "window"), seed)
    tb_topk = _store(lambda s, g: init_block(s, g, "tb", 8, "topk"), seed)
    tm = lambda x: TokenMap(x, 4, 4)
    return [
        ("linear", lambda x, p: linear(x, p, "fc"), {"x": n(2, 3, 6)}, {"params": lin}),
        ("layernorm_affine", lambda x, p: layernorm_affine(x, p, "ln"), {"x": n(2, 3, 6)}, {"params": ln}),
        ("group_norm", lambda x, p: group_norm(x, p, "gn"), {"x": n(2, 16, 3, 3)}, {"params": gn}),
        ("residual_basic_block", lambda x, p: residual_basic_block(x, p, "blk", 2), {"x": n(1, 8, 6, 6)},
         {"params": block, "max_coords": 40}),
        ("topk_attention_full_key",
         lambda x, p: topk_attention(tm(x), p, "attn", 5, 6, "full-key").values, {"x": n(2, 16, 8)},
         {"params": topk, "max_coords": 60, "param_coords": 6}),
        ("topk_attention_selected_key",
         lambda x, p: topk_attention(tm(x), p, "attn", 5, 6, "selected-key").values, {"x": n(2, 16, 8)},
         {"params": topk, "max_coords": 60, "param_coords": 6}),
        ("window_attention", lambda x, p: window_attention(tm(x), p, "attn", 2, 2).values, {"x": n(2, 16, 8)},
         {"params": win, "max_coords": 60, "param_coords": 6}),
        ("patch_merge", lambda x, p: patch_merge(tm(x), p, "m").values, {"x": n(2, 16, 4)},
         {"params": merge, "max_coords": 60, "param_coords": 6}),
        ("inject", lambda s, rr, p: inject(tm(s), rr, p, "inj").values, {"s": n(2, 16, 8), "r": n(2, 4, 4, 4)},
         {"params": inj, "max_coords": 60, "param_coords": 6}),
        ("transformer_block_window",
         lambda x, p: transformer_block(tm(x), p, "tb", "window", _block_cfg(mcfg, "window"), 0).values,
         {"x": n(1, 16, 8)}, {"params": tb_win, "max_coords": 40, "param_coords": 3}),
        ("transformer_block_topk",
         lambda x, p: transformer_block(tm(x), p, "tb", "topk", _block_cfg(mcfg, "topk"), 0).values,
         {"x": n(1, 16, 8)}, {"params": tb_topk, "max_coords": 40, "param_coords": 3}),
    ]


def _block_cfg(mcfg, kind):
    cfg = copy.deepcopy(mcfg)
    cfg.attention.kinds = [kind] * 4
    cfg.attention.window = 2
    cfg.attention.k_tokens = [5] * 4
    cfg.attention.k_channels = [6] * 4
    return cfg


def cross_entropy_case(seed: int = 0):
    from .train import cross_entropy

    r = np.random.default_rng(seed + 2)
    mask = r.integers(0, 3, size=(2, 4, 4))
    return ("cross_entropy", lambda x: cross_entropy(x, mask), {"x": r.standard_normal((2, 3, 4, 4))}, {})


def micro_model_check(eps=DEFAULT_EPS, tol=DEFAULT_TOL, seed: int = 0, param_coords: int = 2,
                      input_size: int = 32) -> CheckResult:
    """End-to-end check of a 2-class micro network, loss = cross entropy."""
    from .train import cross_entropy

    cfg = micro_config(num_classes=2, input_size=input_size)
    params = init_params(cfg, SeededRng(seed)).astype(np.float64)
    r = np.random.default_rng(seed + 3)
    for p, t in params.items():
        if p.endswith((".gamma", ".beta", ".bias")):
            t.data += 0.2 * r.standard_normal(t.shape)
    size = cfg.model.input_size
    image = r.standard_normal((1, 3, size, size))
    mask = r.integers(0, 2, size=(1, size, size))

    def fn(x, p):
        return cross_entropy(forward(p, x, cfg), mask)

    return check_gradients(fn, {"image": image}, eps, tol, max_coords=8, seed=seed, params=params,
                           param_coords=param_coords, name="micro_model_end_to_end")


def run_gradcheck(eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL, seed: int = 0,
                  corrupt: str | None = None, include_model: bool = True) -> list[CheckResult]:
    results = []
    for name, fn, inputs, kw in op_cases(seed) + layer_cases(seed) + [cross_entropy_case(seed)]:
        kw = dict(kw)
        results.append(check_gradients(fn, inputs, eps, tol, seed=seed, corrupt=(name == corrupt),
                                       name=name, **kw))
    if include_model:
        results.append(micro_model_check(eps, tol, seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'coords':>6}  {'refined':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.coords:6d}  {r.refined:7d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
