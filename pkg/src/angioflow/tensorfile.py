"""Minimal binary container for float32 arrays.

Layout: magic ``F32T``, ``u16`` version, ``u16`` ndim, ``ndim`` x ``u32`` dims,
then the little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"F32T"
VERSION = 1
_HEAD = struct.Struct("<4sHH")


class TensorFileError(ValueError):
    pass


def encode(array) -> bytes:
    # np.require keeps 0-d arrays 0-d (ascontiguousarray would promote them)
    a = np.require(np.asarray(array, dtype="<f4"), requirements="C")
    if any(d >= 2**32 for d in a.shape):
        raise TensorFileError(f"dimension too large for u32: {a.shape}")
    return _HEAD.pack(MAGIC, VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TensorFileError("truncated header")
    magic, version, ndim = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    off = _HEAD.size + 4 * ndim
    if len(buf) < off:
        raise TensorFileError("truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEAD.size)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != expected:
        raise TensorFileError(f"payload is {len(buf) - off} bytes, expected {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(path, array) -> None:
    atomic_write_bytes(path, encode(array))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode(path.read_bytes())
    except TensorFileError as exc:
        raise TensorFileError(f"{path}: {exc}") from None
