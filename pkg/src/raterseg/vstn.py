"""VSTN binary tensor files.

Layout: b"VSTN", u8 version (1), u8 dtype code (0=f32, 1=u8), u8 ndim,
ndim x u32 little-endian dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VSTN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    """A file exists but does not hold a valid payload."""


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODES.get(array.dtype)
    if code is None:
        raise TypeError(f"VSTN stores float32 or uint8, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes, name: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Parse one tensor from the start of ``buf``; returns (array, bytes consumed)."""
    if len(buf) < 7:
        raise FormatError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise FormatError(f"{name}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < off + nbytes:
        raise FormatError(f"{name}: truncated payload ({len(buf) - off} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), off + nbytes


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    arr, used = decode(buf, str(path))
    if used != len(buf):
        raise FormatError(f"{path}: {len(buf) - used} trailing bytes")
    return arr
