"""Float binary grids: 8-byte header (``b"GRD"``, channel count, uint16 H, uint16 W)
followed by little-endian float32 values in row-major (H, W, C) order."""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"GRD"
_HEADER = struct.Struct("<3sBHH")


class GridFormatError(ValueError):
    pass


def encode_grid(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or not 1 <= arr.shape[2] <= 255:
        raise GridFormatError(f"grid must be (H, W) or (H, W, C), got {arr.shape}")
    H, W, C = arr.shape
    if H > 0xFFFF or W > 0xFFFF:
        raise GridFormatError(f"grid {H}x{W} too large for the header")
    return _HEADER.pack(MAGIC, C, H, W) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise GridFormatError("truncated grid header")
    magic, C, H, W = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise GridFormatError(f"bad grid magic {magic!r}")
    n = H * W * C * 4
    if len(buf) - _HEADER.size != n:
        raise GridFormatError(f"grid payload is {len(buf) - _HEADER.size} bytes, expected {n}")
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(H, W, C).astype(np.float32)
    return arr[..., 0] if C == 1 else arr


def write_grid(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_grid(arr))


def read_grid(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_grid(f.read())
