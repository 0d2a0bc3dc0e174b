import copy

import numpy as np
import pytest

import cinformer.nn as nn_mod
from cinformer.config import Config, micro_config
from cinformer.model import forward, init_params
from cinformer.nn import ParamStore, init_linear
from cinformer.profile import NORM_FLOPS, FlopCounter, bench, count_flops, profile
from cinformer.rng import SeededRng


def test_two_layer_hand_total():
    # conv 3->8, 3x3, on a 4x4 output: 2*3*9*8*16 = 6912
    # linear over 16 tokens 8->2: 2*16*8*2 = 512
    fc = FlopCounter()
    fc.conv("a", 3, 8, 3, 4)
    fc.linear("b", 16, 8, 2)
    assert fc.total == 6912 + 512 == 7424
    assert dict(fc.by_component) == {"a": 6912, "b": 512}


def test_linear_param_count():
    store = ParamStore()
    init_linear(store, SeededRng(0), "fc", 12, 12)
    assert store.num_scalars() == 12 * 12 + 12


def test_params_match_store():
    for cfg in (Config(), micro_config()):
        rep = profile(cfg)
        store = init_params(cfg, 0)
        assert rep["total"]["params"] == store.num_scalars()
        assert sum(rep[c]["params"] for c in ("stem", "fpn", "encoder", "decoder")) == store.num_scalars()


def test_conv_flops_match_instrumented_forward(monkeypatch):
    cfg = micro_config(num_classes=3)
    seen = []
    real = nn_mod.ad.conv2d

    def spy(x, w, b=None, stride=1, padding=0, name="conv2d"):
        out = real(x, w, b, stride=stride, padding=padding, name=name)
        o, c, kh, kw = w.shape
        seen.append(2 * c * kh * kw * o * out.shape[2] * out.shape[3])
        return out

    monkeypatch.setattr(nn_mod.ad, "conv2d", spy)
    size = cfg.model.input_size
    forward(init_params(cfg, 0), np.zeros((1, 3, size, size), np.float32), cfg)
    assert sum(seen) == count_flops(cfg).by_op["conv"]


def test_norm_cost_constant():
    fc = FlopCounter()
    fc.norm("x", 10)
    assert fc.total == NORM_FLOPS * 10


def test_topk_swap_lowers_total():
    cfg = Config()
    dense = copy.deepcopy(cfg)
    dense.model.attention.kinds = ["window", "window", "dense", "dense"]
    assert profile(cfg)["total"]["flops"] < profile(dense)["total"]["flops"]
    for s in ("stage3", "stage4"):
        assert profile(cfg)["attention_flops"][s] < profile(dense)["attention_flops"][s]


def test_bench_rows():
    rows = {r["kind"]: r for r in bench(Config())}
    assert list(rows) == ["dense-global", "window", "topk full-key", "topk selected-key"]
    assert rows["topk full-key"]["attention_flops"] < rows["dense-global"]["attention_flops"]
    assert rows["topk selected-key"]["attention_flops"] < rows["topk full-key"]["attention_flops"]
    assert rows["topk full-key"]["params"] == profile(Config())["total"]["params"]


def test_window_below_dense_on_large_grid():
    cfg = Config()
    cfg.model.input_size = 256
    cfg.model.attention.k_tokens = [None, None, 32, 12]
    rows = {r["kind"]: r for r in bench(cfg)}
    assert rows["window"]["attention_flops"] < rows["dense-global"]["attention_flops"]
