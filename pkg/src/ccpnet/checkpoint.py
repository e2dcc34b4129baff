"""CCPW checkpoint format.

Layout: magic ``CCPW``, u32 parameter count, then per parameter a u16 name
length, the UTF-8 name, u8 rank, rank x u32 extents and float32 values, all
little-endian.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .exceptions import ParseError
from .tensor import read_extents

MAGIC = b"CCPW"


def dumps(params: dict) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", len(params)))
    for name, value in params.items():
        value = np.asarray(getattr(value, "value", value))
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        out.write(value.astype("<f4").tobytes())
    return out.getvalue()


def loads(data: bytes, path=None) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ParseError("bad magic, expected CCPW", path, 0)
    raw = buf.read(4)
    if len(raw) != 4:
        raise ParseError("truncated parameter count", path, 4)
    (count,) = struct.unpack("<I", raw)
    params = {}
    for _ in range(count):
        pos = buf.tell()
        raw = buf.read(2)
        if len(raw) != 2:
            raise ParseError("truncated name length", path, pos)
        (n,) = struct.unpack("<H", raw)
        name = buf.read(n)
        if len(name) != n:
            raise ParseError("truncated parameter name", path, pos + 2)
        extents = read_extents(buf, path)
        pos = buf.tell()
        size = int(np.prod(extents)) * 4
        payload = buf.read(size)
        if len(payload) != size:
            raise ParseError(f"truncated values for {name.decode(errors='replace')}", path, pos + len(payload))
        params[name.decode()] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(extents)
    if buf.read(1):
        raise ParseError("trailing bytes after last parameter", path, buf.tell() - 1)
    return params


def save(path, params: dict) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes(), path)
