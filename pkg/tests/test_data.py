import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cinformer.data import (generate_dataset, image_to_input, load_split, parse_pgm, read_pgm,
                            render_sample, value_noise, write_pgm)
from cinformer.errors import DataError, FormatError
from cinformer.rng import SeededRng


def test_pgm_header_byte_count(tmp_path):
    path = tmp_path / "one.pgm"
    write_pgm(path, np.zeros((1, 1), np.uint8))
    raw = path.read_bytes()
    header = b"P5\n1 1\n255\n"
    assert len(header) == 11
    assert raw == header + b"\x00"
    assert len(raw) == 12


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_pgm_round_trip(grid):
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "g.pgm"
        write_pgm(path, grid)
        back = read_pgm(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, grid)


def test_pgm_width_height_order(tmp_path):
    write_pgm(tmp_path / "r.pgm", np.zeros((2, 5), np.uint8))
    assert (tmp_path / "r.pgm").read_bytes().startswith(b"P5\n5 2\n255\n")


@pytest.mark.parametrize("buf, where", [
    (b"P2\n1 1\n255\n\x00", "byte 0"),
    (b"P5\n1 1\n65535\n\x00", "maxval"),
    (b"P5\nx 1\n255\n\x00", "byte 2"),
    (b"P5\n2 2\n255\n\x00", "byte 11"),
    (b"P5\n1", "byte"),
])
def test_pgm_malformed(buf, where):
    with pytest.raises(FormatError, match=where):
        parse_pgm(buf)


def test_value_noise_range_and_determinism():
    a = value_noise(SeededRng(1), 64)
    assert a.shape == (64, 64) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, value_noise(SeededRng(1), 64))


def test_generated_dataset_is_deterministic(tmp_path):
    generate_dataset(tmp_path / "a", count=5, size=32, seed=4)
    generate_dataset(tmp_path / "b", count=5, size=32, seed=4)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 11
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_and_split(tmp_path):
    path = generate_dataset(tmp_path, count=20, size=32, seed=2)
    m = json.loads(path.read_text())
    assert m["size"] == 32 and m["seed"] == 2
    assert m["classes"] == ["background", "scratch", "blob", "crack"]
    train, test = m["splits"]["train"], m["splits"]["test"]
    assert len(train) == 14 and len(test) == 6
    assert sorted(train + test) == [f"{i:05d}" for i in range(20)]


def test_value_ranges(tmp_path):
    generate_dataset(tmp_path, count=12, size=32, seed=0)
    x, y, ids = load_split(tmp_path, "all")
    assert len(ids) == 12
    assert y.min() >= 0 and y.max() < 4
    assert x.shape == (12, 3, 32, 32) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1
    np.testing.assert_array_equal(x[:, 0], x[:, 1])


def test_full_contrast_defects_are_visible():
    # mean inside the mask vs outside, over 100 images
    visible = 0
    root = SeededRng(11)
    for i in range(100):
        img, mask = render_sample(root.derive(i), 64, 1.0)
        assert img.dtype == np.uint8 and mask.max() < 4
        inside = img[mask > 0].astype(float)
        outside = img[mask == 0].astype(float)
        if inside.size and abs(inside.mean() - outside.mean()) > 20:
            visible += 1
    assert visible >= 95


def test_low_contrast_shrinks_offset():
    hi, m = render_sample(SeededRng(3), 64, 1.0)
    lo, m2 = render_sample(SeededRng(3), 64, 0.1)
    np.testing.assert_array_equal(m, m2)
    d_hi = abs(hi[m > 0].mean() - hi[m == 0].mean())
    d_lo = abs(lo[m > 0].mean() - lo[m == 0].mean())
    assert d_lo < d_hi


@pytest.mark.parametrize("kw", [{"size": 48}, {"count": 0}, {"contrast": 0.0}, {"contrast": 1.5}])
def test_generator_preconditions(tmp_path, kw):
    with pytest.raises(DataError):
        generate_dataset(tmp_path, **{"count": 1, "size": 32, **kw})


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(blocker / "sub", count=1, size=32)


def test_load_split_errors(tmp_path):
    with pytest.raises(DataError):
        load_split(tmp_path)
    generate_dataset(tmp_path, count=3, size=32)
    with pytest.raises(DataError):
        load_split(tmp_path, "val")
    with pytest.raises(DataError):
        load_split(tmp_path, "all", num_classes=1)


def test_image_to_input_scaling():
    x = image_to_input(np.array([[0, 255]], np.uint8))
    assert x.shape == (3, 1, 2)
    np.testing.assert_allclose(x[0, 0], [-1.0, 1.0])
