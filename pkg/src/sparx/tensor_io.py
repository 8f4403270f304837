"""Binary tensor file format for dumps and fixtures.

Layout: magic bytes ``SPXT``, one u8 dtype code (0 = float32, 1 = float64),
one u8 rank, then rank u32 little-endian dims, then the row-major payload in
little-endian order. Readers reject bad magic, unknown dtype codes, and
truncated payloads.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPXT"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """Raised on malformed tensor files."""


def tensor_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim > 255:
        raise TensorFormatError("rank too large")
    head = MAGIC + struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return head + dims + payload


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(arr))


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise TensorFormatError("file too short for header")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}; expected {MAGIC!r}")
    code, ndim = struct.unpack("<BB", buf[4:6])
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise TensorFormatError("truncated dimension block")
    shape = struct.unpack(f"<{ndim}I", buf[6:off]) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = off + count * dtype.itemsize
    if len(buf) != expected:
        raise TensorFormatError(f"payload length {len(buf) - off} does not match shape {shape}")
    arr = np.frombuffer(buf[off:], dtype=dtype).reshape(shape)
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
