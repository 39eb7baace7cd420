"""Little-endian binary checkpoints: a flat text header followed by a tensor table.

Layout::

    b"VTSKCKPT"  u32 version
    u32 text_len, utf-8 text (``key=value`` lines)
    u32 n_tensors, then per tensor:
        u16 name_len, name, u8 dtype code, u8 ndim, u32 * ndim dims, raw data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"VTSKCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def encode_text(meta: dict) -> str:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "=" in key or len(f"{key}={value}.".splitlines()) != 1:
            raise CheckpointError(f"metadata entry {key!r} is not a flat single-line value")
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def decode_text(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    text = encode_text(meta).encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple:
    """Returns ``(tensors, meta)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (text_len,) = struct.unpack("<I", take(4))
    meta = decode_text(take(text_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, meta
