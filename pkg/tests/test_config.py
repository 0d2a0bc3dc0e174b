import json

import pytest

from cinformer.config import Config, micro_config
from cinformer.errors import ConfigError


def test_round_trip():
    cfg = Config()
    assert Config.from_dict(json.loads(cfg.to_json())) == cfg
    assert Config.from_dict({}) == cfg


def test_unknown_keys_listed():
    with pytest.raises(ConfigError) as err:
        Config.from_dict({"model": {"widths": 3, "attention": {"topk": 1}}, "extra": {}})
    msg = str(err.value)
    for key in ("model.widths", "model.attention.topk", "extra"):
        assert key in msg


def test_scalar_k_broadcasts():
    cfg = Config.from_dict({"model": {"attention": {"k_tokens": 2, "k_channels": 16}}})
    assert cfg.model.attention.k_tokens == [2, 2, 2, 2]


@pytest.mark.parametrize("doc", [
    {"model": {"input_size": 48}},
    {"model": {"attention": {"kinds": ["window", "window", "topk"]}}},
    {"model": {"attention": {"k_tokens": [None, None, 17, 3]}}},
    {"model": {"attention": {"k_channels": [None, None, 96, 999]}}},
    {"model": {"stage_widths": [32, 64, 96, 256]}},
    {"train": {"warmup_frac": 1.0}},
    {"model": {"attention": {"topk_variant": "both"}}},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        Config.from_dict(doc)


def test_load_reports_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        Config.load(p)


def test_micro_config_is_valid():
    cfg = micro_config()
    assert cfg.model.input_size == 32 and cfg.model.num_classes == 2
