"""Flat binary tensor records.

A record is ``rank`` as uint64, then ``rank`` uint64 dims, then the row-major
float64 payload; everything little-endian.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor


def header_nbytes(rank: int) -> int:
    return 8 * (1 + rank)


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record at ``offset``; returns the array and the next offset."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor record")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)
    return arr, end


def save(t: Tensor | np.ndarray, fh: BinaryIO) -> None:
    fh.write(to_bytes(t))


def load(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<Q", fh.read(8))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    return np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
