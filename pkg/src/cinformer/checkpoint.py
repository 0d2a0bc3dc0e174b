"""Binary checkpoint format.

Little-endian layout::

    b"CINT" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | extents u32 x rank |
               dtype u8 | row-major payload

dtype codes: 0 float32, 1 int64, 2 float64, 3 raw bytes.  The resolved
configuration is the final entry, ``__config__``, stored as UTF-8 JSON bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CINT"
VERSION = 1
CONFIG_ENTRY = "__config__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def encode(entries: dict[str, np.ndarray]) -> bytes:
    """Serialise named arrays in insertion order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"entry {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(n * dt.itemsize)
        if name in out:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after the last checkpoint entry")
    return out


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params, optimizer_state=None, config=None, extra: dict | None = None) -> None:
    """Params, optimizer moments and step, extra scalars, then ``__config__``."""
    entries: dict[str, np.ndarray] = {}
    for p, t in params.items():
        entries[p] = t.data
    if optimizer_state is not None:
        entries.update(optimizer_state.to_entries())
    for key, value in (extra or {}).items():
        entries[key] = np.asarray(value)
    if config is not None:
        entries[CONFIG_ENTRY] = np.frombuffer(config.to_json().encode("utf-8"), dtype=np.uint8)
    write_atomic(path, encode(entries))


def load_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_checkpoint(path):
    """(params, optimizer_state or None, config, extra entries)."""
    from .config import Config
    from .nn import ParamStore
    from .train import AdamWState

    entries = load_entries(path)
    if CONFIG_ENTRY not in entries:
        raise FormatError(f"{path}: checkpoint has no {CONFIG_ENTRY} entry")
    config = Config.from_dict(json.loads(entries.pop(CONFIG_ENTRY).tobytes().decode("utf-8")))
    opt_entries = {k: v for k, v in entries.items() if k.startswith(AdamWState.PREFIX)}
    extra = {k: v for k, v in entries.items() if k.startswith("__") and k not in opt_entries}
    params = ParamStore()
    for name, arr in entries.items():
        if name in opt_entries or name in extra:
            continue
        params.add(name, arr)
    if config.model.freeze_stem:
        params.freeze_prefix("stem.", "fpn.")
    state = AdamWState.from_entries(opt_entries, params) if opt_entries else None
    return params, state, config, extra
