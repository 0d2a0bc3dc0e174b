import numpy as np
import pytest

from cinformer.autodiff import Tensor
from cinformer.config import Config
from cinformer.errors import DimensionError
from cinformer.gradcheck import check_gradients
from cinformer.model import init_params
from cinformer.nn import ParamStore
from cinformer.rng import SeededRng
from cinformer.stem import backbone_forward, fpn_topdown, init_stem, stem_forward


@pytest.fixture(scope="module")
def params():
    return init_params(Config(), 0)


def image(size=64, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((1, 3, size, size)).astype(np.float32))


def test_backbone_shapes(params):
    feats = backbone_forward(image(), params)
    assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]


def test_backbone_rejects_indivisible_input(params):
    with pytest.raises(DimensionError):
        backbone_forward(image(48), params)


def test_fpn_widths_and_r1_side(params):
    pyr = stem_forward(image(), params)
    assert [r.shape[1] for r in pyr] == [32] * 4
    assert pyr.r1.shape[-2:] == (16, 16)
    assert pyr.r4.shape[-2:] == (2, 2)


def test_zero_weights_zero_features():
    store = ParamStore()
    init_stem(store, SeededRng(0), [16, 32, 64, 128], 32)
    for p, t in store.items():
        if p.endswith(".weight"):
            t.data[...] = 0
    for f in backbone_forward(image(), store):
        assert not np.any(f.data)


def test_every_backbone_param_gets_a_gradient(params):
    params.zero_grad()
    pyr = stem_forward(image(), params)
    sum(r.sum() for r in pyr).backward()
    missing = [p for p, t in params.items() if p.startswith(("stem.", "fpn.")) and t.grad is None]
    assert not missing
    params.zero_grad()


def test_zero_laterals_leave_only_topdown_path(params):
    p = params.copy()
    feats = list(backbone_forward(image(), p))
    for i in (1, 2, 3):
        p[f"fpn.lat{i}.weight"].data[...] = 0
        p[f"fpn.lat{i}.bias"].data[...] = 0
    base = fpn_topdown(feats, p)
    # B1..B3 no longer matter
    other = [Tensor(np.random.default_rng(1).standard_normal(f.shape).astype(np.float32)) for f in feats[:3]]
    moved = fpn_topdown(other + feats[3:], p)
    for a, b in zip(base, moved):
        np.testing.assert_array_equal(a.data, b.data)


def test_fpn_gradients_match_finite_differences():
    store = ParamStore()
    init_stem(store, SeededRng(3), [8, 8, 8, 8], 8)
    store = store.astype(np.float64)
    r = np.random.default_rng(3)
    feats = {f"b{i}": r.standard_normal((1, 8, s, s)) for i, s in zip(range(1, 5), (8, 4, 2, 1))}

    def fn(b1, b2, b3, b4, p):
        return fpn_topdown([b1, b2, b3, b4], p).r1

    res = check_gradients(fn, feats, params=store, param_coords=3, max_coords=20, name="fpn")
    assert res.passed, res.max_rel_err
