"""Synthetic surface-defect dataset and the PGM image format.

Images are value-noise backgrounds carrying one to three defects
(scratch, blob, crack) whose intensity offset scales with ``contrast``.
Layout on disk::

    images/<id>.pgm   8-bit grayscale image
    masks/<id>.pgm    8-bit class index per pixel
    manifest.json     {size, classes, splits: {train, test}, seed, ...}
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .rng import SeededRng

CLASSES = ("background", "scratch", "blob", "crack")
OCTAVES = 3
BASE_CELLS = 4
TRAIN_FRACTION = 0.7
BG_LOW, BG_SPAN = 64.0, 128.0
_SPLIT_STREAM = 1 << 40


# PGM -----------------------------------------------------------------------

def write_pgm(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"PGM payload must be 2-D, got shape {grid.shape}")
    if grid.dtype != np.uint8:
        if grid.min() < 0 or grid.max() > 255:
            raise FormatError("PGM values must lie in [0, 255]")
        grid = grid.astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(grid).tobytes())


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated PGM header at byte {start}")
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    magic, pos = _pgm_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r} at byte 0)")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"malformed PGM header field {tok!r} near byte {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval} (header ends at byte {pos})")
    if w < 1 or h < 1:
        raise FormatError(f"PGM extents must be positive, got {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after PGM header at byte {pos}")
    pos += 1
    data = buf[pos:]
    if len(data) != w * h:
        raise FormatError(f"PGM payload at byte {pos} has {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


# generator ------------------------------------------------------------------

def value_noise(rng: SeededRng, size: int, octaves: int = OCTAVES) -> np.ndarray:
    """Sum of bilinearly interpolated random lattices, normalised to [0, 1]."""
    total = np.zeros((size, size))
    amp_sum = 0.0
    for o in range(octaves):
        cells = BASE_CELLS * 2 ** o
        lattice = rng.uniform((cells + 1) ** 2).reshape(cells + 1, cells + 1)
        coords = (np.arange(size) + 0.5) * cells / size
        i0 = np.minimum(coords.astype(int), cells - 1)
        t = coords - i0
        rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
        layer = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
        amp = 0.5 ** o
        total += amp * layer
        amp_sum += amp
    return total / amp_sum


def _segment_distance(yy, xx, p0, p1):
    d = np.subtract(p1, p0)
    length2 = float(d @ d)
    if length2 == 0:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / length2, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _line_coverage(dist, width):
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _scratch(rng, yy, xx, size, scale):
    cy, cx = rng.uniform_range(0.15, 0.85) * size, rng.uniform_range(0.15, 0.85) * size
    angle = rng.uniform() * math.pi
    half = 0.5 * rng.uniform_range(0.3, 0.7) * size
    width = rng.uniform_range(3.5, 6.0) * scale
    dy, dx = half * math.sin(angle), half * math.cos(angle)
    dist = _segment_distance(yy, xx, (cy - dy, cx - dx), (cy + dy, cx + dx))
    return _line_coverage(dist, width)


def _blob(rng, yy, xx, size, scale):
    cy, cx = rng.uniform_range(0.2, 0.8) * size, rng.uniform_range(0.2, 0.8) * size
    a = rng.uniform_range(4.0, 12.0) * scale
    b = rng.uniform_range(4.0, 12.0) * scale
    theta = rng.uniform() * math.pi
    u = (yy - cy) * math.cos(theta) + (xx - cx) * math.sin(theta)
    v = -(yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)
    signed = (np.sqrt((u / a) ** 2 + (v / b) ** 2) - 1.0) * min(a, b)
    return np.clip(0.5 - signed, 0.0, 1.0)


def _crack(rng, yy, xx, size, scale):
    y, x = rng.uniform_range(0.2, 0.8) * size, rng.uniform_range(0.2, 0.8) * size
    heading = rng.uniform() * 2 * math.pi
    width = rng.uniform_range(3.0, 4.5) * scale
    steps = rng.randint(8, 20)
    turns = rng.normal(steps)
    cover = np.zeros_like(yy)
    for s in range(steps):
        heading += 0.6 * turns[s]
        step = rng.uniform_range(2.0, 4.0) * scale
        ny = min(max(y + step * math.sin(heading), 0.0), size - 1.0)
        nx = min(max(x + step * math.cos(heading), 0.0), size - 1.0)
        cover = np.maximum(cover, _line_coverage(_segment_distance(yy, xx, (y, x), (ny, nx)), width))
        y, x = ny, nx
    return cover


_DEFECTS = {1: _scratch, 2: _blob, 3: _crack}


def render_sample(rng: SeededRng, size: int, contrast: float) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair as uint8 arrays."""
    scale = size / 64
    background = BG_LOW + BG_SPAN * value_noise(rng, size)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    polarity = 1.0 if rng.uniform() < 0.5 else -1.0
    offset = contrast * 0.5 * 255.0
    mask = np.zeros((size, size), dtype=np.uint8)
    coverage = np.zeros((size, size))
    for _ in range(rng.randint(1, 3)):
        label = rng.randint(1, 3)
        cov = _DEFECTS[label](rng, yy, xx, size, scale)
        mask[cov >= 0.5] = label
        coverage = np.maximum(coverage, cov)
    image = np.clip(np.rint(background + polarity * offset * coverage), 0, 255).astype(np.uint8)
    return image, mask


def split_ids(ids, seed: int) -> tuple[list, list]:
    perm = SeededRng(seed).derive(_SPLIT_STREAM).permutation(len(ids))
    n_train = int(round(TRAIN_FRACTION * len(ids)))
    train = sorted(ids[i] for i in perm[:n_train])
    test = sorted(ids[i] for i in perm[n_train:])
    return train, test


def generate_dataset(out_dir, count: int = 64, size: int = 64, contrast: float = 0.6,
                     seed: int = 0, num_defect_classes: int = 3) -> Path:
    """Write ``count`` samples under ``out_dir``; returns the manifest path."""
    if size % 32 or size <= 0:
        raise DataError(f"size must be a positive multiple of 32, got {size}")
    if count < 1:
        raise DataError("count must be >= 1")
    if not 0 < contrast <= 1:
        raise DataError(f"contrast must lie in (0, 1], got {contrast}")
    if num_defect_classes != 3:
        raise DataError("the generator draws exactly 3 defect classes")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    root = SeededRng(seed)
    ids = [f"{i:05d}" for i in range(count)]
    for i, sid in enumerate(ids):
        image, mask = render_sample(root.derive(i), size, contrast)
        write_pgm(out / "images" / f"{sid}.pgm", image)
        write_pgm(out / "masks" / f"{sid}.pgm", mask)
    train, test = split_ids(ids, seed)
    manifest = {
        "size": size,
        "classes": list(CLASSES),
        "splits": {"train": train, "test": test},
        "seed": seed,
        "count": count,
        "contrast": contrast,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# loading --------------------------------------------------------------------

def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W) -> float32 (3, H, W) in [-1, 1], gray replicated to 3 channels."""
    x = image.astype(np.float32) / 127.5 - 1.0
    return np.repeat(x[None], 3, axis=0)


def load_split(data_dir, split: str = "train", num_classes: int | None = None):
    """Images (N, 3, H, W) float32, masks (N, H, W) int64 and ids for a split."""
    manifest = read_manifest(data_dir)
    if split == "all":
        ids = sorted(manifest["splits"]["train"] + manifest["splits"]["test"])
    elif split in manifest["splits"]:
        ids = manifest["splits"][split]
    else:
        raise DataError(f"unknown split {split!r}; manifest has {sorted(manifest['splits'])}")
    root = Path(data_dir)
    images, masks = [], []
    for sid in ids:
        img = read_pgm(root / "images" / f"{sid}.pgm")
        msk = read_pgm(root / "masks" / f"{sid}.pgm")
        if img.shape != msk.shape:
            raise DataError(f"sample {sid}: image {img.shape} and mask {msk.shape} differ")
        if num_classes is not None and msk.max() >= num_classes:
            raise DataError(f"sample {sid}: mask value {int(msk.max())} >= {num_classes} classes")
        images.append(image_to_input(img))
        masks.append(msk.astype(np.int64))
    if not ids:
        return np.zeros((0, 3, manifest["size"], manifest["size"]), np.float32), \
            np.zeros((0, manifest["size"], manifest["size"]), np.int64), []
    return np.stack(images), np.stack(masks), list(ids)
