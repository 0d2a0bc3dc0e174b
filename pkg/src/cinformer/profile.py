"""Parameter and FLOP accounting for one forward pass of a single image.

Counted ops: convolutions and linear layers (2 FLOPs per multiply-add,
bias adds ignored), normalisations (``NORM_FLOPS`` per element, affine
included) and attention (see :func:`cinformer.attention.flops_of_attention`).
Activations, residual adds, upsampling and the loss are not counted.
"""
from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, field

from .attention import flops_of_attention
from .config import Config
from .encoder import MLP_RATIO
from .model import init_params
from .stem import BLOCKS_PER_STAGE

NORM_FLOPS = 7  # mean, centre, square, variance, scale, affine mul + add
COMPONENTS = ("stem", "fpn", "encoder", "decoder")


@dataclass
class FlopCounter:
    by_component: dict = field(default_factory=lambda: defaultdict(int))
    attention: dict = field(default_factory=lambda: defaultdict(int))
    by_op: dict = field(default_factory=lambda: defaultdict(int))

    def _add(self, comp, op, f):
        self.by_component[comp] += f
        self.by_op[op] += f
        return f

    def conv(self, comp: str, cin: int, cout: int, k: int, out_side: int) -> int:
        return self._add(comp, "conv", 2 * cin * k * k * cout * out_side * out_side)

    def linear(self, comp: str, tokens: int, cin: int, cout: int) -> int:
        return self._add(comp, "linear", 2 * tokens * cin * cout)

    def norm(self, comp: str, elements: int) -> int:
        return self._add(comp, "norm", NORM_FLOPS * elements)

    def attn(self, comp: str, stage: int, kind: str, **kw) -> int:
        f = self._add(comp, "attention", flops_of_attention(kind, **kw))
        self.attention[stage] += f
        return f

    @property
    def total(self) -> int:
        return sum(self.by_component.values())


def count_flops(config: Config) -> FlopCounter:
    m = config.model
    fc = FlopCounter()
    size = m.input_size
    side = size // 2
    fc.conv("stem", 3, m.stem_widths[0], 3, side)
    fc.norm("stem", m.stem_widths[0] * side * side)
    cin = m.stem_widths[0]
    sides = []
    for cout in m.stem_widths:
        side //= 2
        sides.append(side)
        for j in range(BLOCKS_PER_STAGE):
            c_in = cin if j == 0 else cout
            fc.conv("stem", c_in, cout, 3, side)
            fc.conv("stem", cout, cout, 3, side)
            fc.norm("stem", 2 * cout * side * side)
            if j == 0:
                # block0 always strides, so it always has a projection shortcut
                fc.conv("stem", c_in, cout, 1, side)
                fc.norm("stem", cout * side * side)
        cin = cout
    cf = m.fpn_width
    for i, (c, s) in enumerate(zip(m.stem_widths, sides), start=1):
        fc.conv("fpn", c, cf, 1, s)
        fc.conv("fpn", cf if i == 4 else 2 * cf, cf, 3, s)
    widths = m.stage_widths
    fc.linear("encoder", sides[0] ** 2, cf, widths[0])
    for i in range(4):
        s, c = sides[i], widths[i]
        n = s * s
        if i > 0:
            fc.norm("encoder", n * 4 * widths[i - 1])
            fc.linear("encoder", n, 4 * widths[i - 1], c)
            if m.inject:
                fc.conv("encoder", cf, cf, 1, s)
                fc.linear("encoder", n, c + cf, c)
        kind = m.attention.kinds[i]
        for _ in range(m.stage_depths[i]):
            fc.norm("encoder", 2 * n * c)
            if kind == "topk":
                kt, kc = m.k_for_stage(i)
                variant = "topk-selected" if m.attention.topk_variant == "selected-key" else "topk"
                fc.attn("encoder", i + 1, variant, n=n, c=c, k_t=kt, k_c=kc)
            elif kind == "dense":
                fc.attn("encoder", i + 1, "dense", n=n, c=c, h=m.attention.heads)
            else:
                fc.attn("encoder", i + 1, "window", n=n, c=c, h=m.attention.heads, w=m.window_for_stage(i))
            fc.linear("encoder", n, c, MLP_RATIO * c)
            fc.linear("encoder", n, MLP_RATIO * c, c)
    for i in (3, 2, 1):
        s = sides[i - 1]
        fc.conv("decoder", widths[i] + widths[i - 1], widths[i - 1], 3, s)
        fc.conv("decoder", widths[i - 1], widths[i - 1], 3, s)
        fc.norm("decoder", 2 * widths[i - 1] * s * s)
    fc.conv("decoder", widths[0], m.num_classes, 1, sides[0])
    return fc


def count_params(config: Config) -> dict:
    params = init_params(config, 0)
    out = {c: 0 for c in COMPONENTS}
    for path, t in params.items():
        out[path.split(".", 1)[0]] += t.size
    out["total"] = params.num_scalars()
    return out


def profile(config: Config) -> dict:
    """{component: {"params", "flops"}} plus "total" and per-stage attention FLOPs."""
    fc = count_flops(config)
    params = count_params(config)
    report = {c: {"params": params[c], "flops": fc.by_component[c]} for c in COMPONENTS}
    report["total"] = {"params": params["total"], "flops": fc.total}
    report["attention_flops"] = {f"stage{s}": fc.attention[s] for s in sorted(fc.attention)}
    return report


BENCH_KINDS = ("dense-global", "window", "topk full-key", "topk selected-key")


def bench(config: Config, stages=(2, 3)) -> list[dict]:
    """Profile the model with the given stages switched to each attention kind."""
    rows = []
    for label in BENCH_KINDS:
        cfg = copy.deepcopy(config)
        kinds = list(cfg.model.attention.kinds)
        for i in stages:
            kinds[i] = {"dense-global": "dense", "window": "window"}.get(label, "topk")
        cfg.model.attention.kinds = kinds
        if label.startswith("topk"):
            cfg.model.attention.topk_variant = label.split()[1]
        rep = profile(cfg)
        rows.append({
            "kind": label,
            "attention_flops": sum(rep["attention_flops"][f"stage{i + 1}"] for i in stages),
            "total_flops": rep["total"]["flops"],
            "params": rep["total"]["params"],
        })
    return rows
