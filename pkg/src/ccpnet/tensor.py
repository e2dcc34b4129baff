"""Dense tensor helpers on top of numpy.

Tensors are plain ``numpy.ndarray`` objects with 1 to 5 axes in canonical
(batch, channel, depth, height, width) order, C-contiguous (last axis
fastest) and float32 or float64.  This module adds the validated
constructors, the exact-shape elementwise combinators, the index codec and
the ``CCT1`` binary format.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import ParseError, ShapeError

CCT1_MAGIC = b"CCT1"
_PRECISION_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MAX_RANK = 5


def _check_extents(extents: Sequence[int]) -> tuple[int, ...]:
    extents = tuple(int(e) for e in extents)
    if not 1 <= len(extents) <= MAX_RANK:
        raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got {len(extents)}")
    if any(e < 1 for e in extents):
        raise ShapeError(f"every extent must be >= 1, got {list(extents)}")
    return extents


def full(extents: Sequence[int], fill: float, dtype=np.float64) -> np.ndarray:
    return np.full(_check_extents(extents), fill, dtype=dtype)


def zeros(extents: Sequence[int], dtype=np.float64) -> np.ndarray:
    return full(extents, 0.0, dtype=dtype)


def map_tensor(t: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a vectorised elementwise function, preserving extents."""
    out = np.asarray(fn(t), dtype=t.dtype)
    if out.shape != t.shape:
        raise ShapeError(f"elementwise function changed extents {t.shape} -> {out.shape}")
    return out


def zip_tensors(t: np.ndarray, u: np.ndarray, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Combine two tensors of identical extents elementwise (no broadcasting)."""
    if t.shape != u.shape:
        raise ShapeError(f"extent mismatch: {list(t.shape)} vs {list(u.shape)}")
    return np.asarray(fn(t, u), dtype=np.result_type(t, u))


def _check_axis(t: np.ndarray, axis: int) -> int:
    if not 0 <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    return axis


def reduce_sum(t: np.ndarray, axis: int) -> np.ndarray:
    return t.sum(axis=_check_axis(t, axis))


def argmax_axis(t: np.ndarray, axis: int) -> np.ndarray:
    """Index of the maximum along ``axis``; ties go to the lowest index."""
    # np.argmax already returns the first occurrence.
    return np.argmax(t, axis=_check_axis(t, axis))


def ravel_index(coord: Sequence[int], extents: Sequence[int]) -> int:
    """Row-major linear index, e.g. (((b*C + c)*D + z)*H + y)*W + x."""
    if len(coord) != len(extents):
        raise ShapeError("coordinate rank does not match extents")
    index = 0
    for c, e in zip(coord, extents):
        if not 0 <= c < e:
            raise ShapeError(f"coordinate {list(coord)} outside extents {list(extents)}")
        index = index * e + c
    return index


def unravel_index(index: int, extents: Sequence[int]) -> tuple[int, ...]:
    size = int(np.prod(extents))
    if not 0 <= index < size:
        raise ShapeError(f"linear index {index} outside [0, {size})")
    coord = []
    for e in reversed(extents):
        index, c = divmod(index, e)
        coord.append(c)
    return tuple(reversed(coord))


@dataclass
class Parameter:
    """A learnable tensor and its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.grad.dtype != self.value.dtype:
            raise ShapeError(f"gradient of {self.name} does not match its value")

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0


# --- CCT1 ----------------------------------------------------------------

def _header(t: np.ndarray) -> bytes:
    code = _PRECISION_CODES.get(t.dtype)
    if code is None:
        raise ShapeError(f"unsupported precision {t.dtype}")
    _check_extents(t.shape)
    return struct.pack(f"<BB{t.ndim}I", code, t.ndim, *t.shape)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    return CCT1_MAGIC + _header(t) + np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()


def read_extents(buf: io.BufferedIOBase, path=None) -> tuple[int, ...]:
    """Read ``u8 rank`` followed by ``rank`` little-endian u32 extents."""
    start = buf.tell()
    raw = buf.read(1)
    if len(raw) != 1:
        raise ParseError("truncated rank", path, start)
    rank = raw[0]
    if not 1 <= rank <= MAX_RANK:
        raise ParseError(f"invalid rank {rank}", path, start)
    raw = buf.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ParseError("truncated extents", path, start + 1)
    extents = struct.unpack(f"<{rank}I", raw)
    if any(e < 1 for e in extents):
        raise ParseError(f"zero extent in {list(extents)}", path, start + 1)
    return extents


def tensor_from_bytes(data: bytes, path=None) -> np.ndarray:
    buf = io.BytesIO(data)
    if buf.read(4) != CCT1_MAGIC:
        raise ParseError("bad magic, expected CCT1", path, 0)
    raw = buf.read(1)
    if len(raw) != 1 or raw[0] not in _CODE_DTYPES:
        raise ParseError("invalid precision code", path, 4)
    dtype = _CODE_DTYPES[raw[0]]
    extents = read_extents(buf, path)
    offset = buf.tell()
    count = int(np.prod(extents))
    payload = buf.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ParseError(f"truncated payload: expected {count * dtype.itemsize} bytes, got {len(payload)}",
                         path, offset + len(payload))
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(extents)


def save_tensor(t: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), path)
