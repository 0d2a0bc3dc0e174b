import struct

import numpy as np
import pytest

from cinformer.checkpoint import (CONFIG_ENTRY, MAGIC, decode, encode, load_checkpoint,
                                  load_entries, save_checkpoint)
from cinformer.config import micro_config
from cinformer.errors import FormatError
from cinformer.model import init_params
from cinformer.train import AdamWState


def test_layout_of_a_single_entry():
    raw = encode({"w": np.array([[1.5, -2.0]], np.float32)})
    expected = (MAGIC + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + b"\x02"
                + struct.pack("<II", 1, 2) + b"\x00" + np.array([1.5, -2.0], "<f4").tobytes())
    assert raw == expected


def test_round_trip_every_dtype():
    entries = {
        "a": np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32),
        "b": np.array(7, np.int64),
        "c": np.array([np.pi], np.float64),
        "d": np.frombuffer(b"hello", np.uint8),
        "e": np.zeros((0,), np.float32),
    }
    back = decode(encode(entries))
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].dtype == entries[k].dtype and back[k].shape == entries[k].shape
        assert back[k].tobytes() == entries[k].tobytes()


def test_save_load_save_identical(tmp_path):
    cfg = micro_config()
    params = init_params(cfg, 0)
    state = AdamWState.for_params(params, weight_decay=0.1)
    state.step = 3
    for m in state.m.values():
        m += 0.25
    save_checkpoint(tmp_path / "a.ckpt", params, state, cfg, {"__train__.best_miou": np.float64(0.5)})
    p2, s2, c2, extra = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", p2, s2, c2, extra)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert s2.step == 3 and c2.to_json() == cfg.to_json()
    assert list(load_entries(tmp_path / "a.ckpt"))[-1] == CONFIG_ENTRY


def test_rejects_bad_magic_version_and_truncation():
    raw = encode({"w": np.ones(4, np.float32)})
    with pytest.raises(FormatError, match="magic"):
        decode(b"XINT" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        decode(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="truncated"):
        decode(raw[:-1])
    with pytest.raises(FormatError, match="trailing"):
        decode(raw + b"\x00")


def test_rejects_corrupted_payload_length():
    raw = bytearray(encode({"w": np.ones(4, np.float32)}))
    # extent field sits after magic, version, count, name length, name, rank
    off = 4 + 8 + 2 + 1 + 1
    raw[off:off + 4] = struct.pack("<I", 5)
    with pytest.raises(FormatError):
        decode(bytes(raw))


def test_rejects_duplicate_names():
    one = encode({"w": np.ones(1, np.float32)})
    body = one[12:]
    raw = MAGIC + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(FormatError, match="duplicate"):
        decode(raw)


def test_write_is_atomic_on_failure(tmp_path, monkeypatch):
    cfg = micro_config()
    params = init_params(cfg, 0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, params, None, cfg)
    before = path.read_bytes()
    import cinformer.checkpoint as ck

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ck.os, "replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, init_params(cfg, 1), None, cfg)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
