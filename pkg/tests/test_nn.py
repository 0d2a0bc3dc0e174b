import math

import numpy as np
import pytest

from cinformer import autodiff as ad
from cinformer.autodiff import Tensor
from cinformer.config import Config, micro_config
from cinformer.gradcheck import check_gradients, layer_cases
from cinformer.model import init_params
from cinformer.nn import (ParamStore, group_norm, init_basic_block, init_linear, init_norm,
                          layernorm_affine, linear, residual_basic_block, upsample2x)
from cinformer.rng import SeededRng


def test_linear_hand_values():
    store = ParamStore()
    store.add("fc.weight", np.array([[1.0], [1.0]]))
    store.add("fc.bias", np.array([0.5]))
    assert linear(np.array([1.0, 2.0]), store, "fc").data.tolist() == [3.5]


def test_linear_identity_and_bias_grad(rs):
    store = ParamStore()
    store.add("fc.weight", np.eye(3))
    store.add("fc.bias", np.zeros(3))
    x = rs.normal(size=(4, 3))
    y = linear(x, store, "fc")
    np.testing.assert_allclose(y.data, x)
    up = rs.normal(size=(4, 3))
    y.backward(up)
    np.testing.assert_allclose(store["fc.bias"].grad, up.sum(0))


def test_layernorm_affine_defaults_and_constant_token(rs):
    store = ParamStore()
    init_norm(store, "ln", 5)
    x = rs.normal(size=(3, 5))
    np.testing.assert_array_equal(layernorm_affine(x, store, "ln").data, ad.layernorm(x).data)
    store["ln.beta"].data[:] = [1, 2, 3, 4, 5]
    out = layernorm_affine(np.full((1, 5), 7.0), store, "ln").data
    np.testing.assert_allclose(out[0], [1, 2, 3, 4, 5])


def test_group_norm_normalises_each_group(rs):
    store = ParamStore()
    init_norm(store, "gn", 16)
    out = group_norm(rs.normal(size=(2, 16, 3, 3)) * 4 + 1, store, "gn").data
    g = out.reshape(2, 8, -1)
    np.testing.assert_allclose(g.mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(g.var(-1), 1, atol=1e-3)


def test_upsample2x_modes():
    np.testing.assert_array_equal(upsample2x(np.ones((1, 1, 1, 1)), "nearest").data, np.ones((1, 1, 2, 2)))
    np.testing.assert_allclose(upsample2x(np.array([[[[0.0, 2.0]]]]), "bilinear").data[0, 0, 0],
                               [0, 0.5, 1.5, 2])


def test_basic_block_zero_weights_zero_input():
    store = ParamStore()
    init_basic_block(store, SeededRng(0), "blk", 8, 16, 2)
    for _, t in store.items():
        if t.name.endswith("weight"):
            t.data[...] = 0
    out = residual_basic_block(np.zeros((1, 8, 8, 8), np.float32), store, "blk", 2)
    assert out.shape == (1, 16, 4, 4)
    assert not np.any(out.data)


def test_basic_block_shortcut_only_when_needed():
    store = ParamStore()
    init_basic_block(store, SeededRng(0), "a", 8, 8, 1)
    init_basic_block(store, SeededRng(0), "b", 8, 8, 2)
    assert "a.shortcut.weight" not in store
    assert "b.shortcut.weight" in store


def test_init_is_deterministic_and_bounded():
    cfg = Config()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert a.paths() == b.paths()
    for (p, ta), (_, tb) in zip(a.items(), b.items()):
        assert ta.data.tobytes() == tb.data.tobytes(), p
        assert ta.dtype == np.float32
        if p.endswith(".weight"):
            fan_in = ta.shape[0] if ta.ndim == 2 else int(np.prod(ta.shape[1:]))
            assert np.abs(ta.data).max() <= math.sqrt(6 / fan_in)
        elif p.endswith((".bias", ".beta")):
            assert not np.any(ta.data)
        elif p.endswith(".gamma"):
            assert np.all(ta.data == 1)
    assert any(not np.array_equal(ta.data, tc.data)
               for (_, ta), (_, tc) in zip(a.items(), init_params(cfg, 6).items()))


def test_gamma_once_per_topk_block():
    cfg = Config()
    params = init_params(cfg, 0)
    gammas = [p for p in params.paths() if p.endswith("attn.gamma")]
    expected = [f"encoder.stage{i + 1}.block{j}.attn.gamma"
                for i, kind in enumerate(cfg.model.attention.kinds) if kind == "topk"
                for j in range(cfg.model.stage_depths[i])]
    assert sorted(gammas) == sorted(expected)


def test_param_store_order_and_flags():
    store = ParamStore()
    store.add("b.x", np.zeros(2))
    store.add("a.y", np.zeros(3))
    assert store.paths() == ["a.y", "b.x"]
    assert store.num_scalars() == 5
    store.freeze_prefix("a.")
    assert not store.is_trainable("a.y") and store.is_trainable("b.x")
    with pytest.raises(KeyError):
        store.add("a.y", np.zeros(1))


def test_freeze_stem_flags():
    cfg = micro_config()
    cfg.model.freeze_stem = True
    params = init_params(cfg, 0)
    for p in params.paths():
        assert params.is_trainable(p) == (not p.startswith(("stem.", "fpn.")))


@pytest.mark.parametrize("seed", range(3))
def test_layers_match_finite_differences(seed):
    failed = []
    for name, fn, inputs, kw in layer_cases(seed):
        r = check_gradients(fn, inputs, seed=seed, name=name, **kw)
        if not r.passed:
            failed.append((name, r.max_rel_err))
    assert not failed
