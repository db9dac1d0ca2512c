"""GTEN binary tensor files.

Layout: ``b"GTEN"``, u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 ndim,
one padding byte, ``ndim`` little-endian u32 dims, then the elements as
raw little-endian values in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"GTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class GtenError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise GtenError(f"GTEN stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise GtenError("too many dimensions")
    head = MAGIC + struct.pack("<BBBx", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; returns it with the offset just past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise GtenError("bad magic, not a GTEN tensor")
    try:
        version, code, ndim = struct.unpack_from("<BBBx", buf, offset + 4)
    except struct.error:
        raise GtenError("truncated GTEN header") from None
    if version != VERSION:
        raise GtenError(f"unsupported GTEN version {version}")
    if code not in _DTYPES:
        raise GtenError(f"unknown GTEN dtype code {code}")
    pos = offset + 8
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    end = pos + count * dt.itemsize
    if end > len(buf):
        raise GtenError("truncated GTEN payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), end


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        arr, end = decode(buf)
    except GtenError as exc:
        raise GtenError(f"{path}: {exc}") from None
    if end != len(buf):
        raise GtenError(f"{path}: trailing bytes after tensor payload")
    return arr
