"""Bit-exact weights container.

Little-endian layout::

    b"EINW" | u32 version (=1) | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 values
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError, InvalidValueError, LengthError
from ..weights import ModelWeights

MAGIC = b"EINW"
VERSION = 1


def dumps_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, value in weights.items():
        arr = np.asarray(value, dtype="<f4")
        if not np.isfinite(arr).all():
            raise InvalidValueError(f"refusing to save non-finite tensor {name!r}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} exceeds container limits")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads_weights(blob: bytes) -> ModelWeights:
    if len(blob) < 12:
        raise LengthError(f"weights file truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    pos = 12
    out = ModelWeights()

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise LengthError(f"weights file truncated at byte {pos} (need {n} more)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after {count} entries")
    return out


def save_weights(weights: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(dumps_weights(weights))


def load_weights(path) -> ModelWeights:
    return loads_weights(Path(path).read_bytes())
