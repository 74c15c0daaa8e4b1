"""Tensor conventions and the ``.ten`` binary format.

A tensor is a C-contiguous ``numpy.ndarray`` of ``float64``. The on-disk
format is a little-endian header (``u32`` rank, then ``rank`` ``u64`` dims)
followed by the raw ``f64`` payload in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError, ShapeError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array (no copy if already one)."""
    a = np.asarray(x, dtype=DTYPE)
    # ascontiguousarray would promote 0-d arrays to 1-d
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{what} contains non-finite values")


def tensor_to_bytes(x) -> bytes:
    x = as_tensor(x)
    header = struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + x.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise DataError("truncated .ten header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    offset = 4 + 8 * rank
    if len(buf) < offset:
        raise DataError("truncated .ten header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 4)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise DataError(
            f".ten payload has {len(buf) - offset} bytes, expected {8 * count} for shape {shape}"
        )
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(DTYPE).reshape(shape)


def save_tensor(path: str | os.PathLike, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
