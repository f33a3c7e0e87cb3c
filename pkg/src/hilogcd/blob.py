"""Binary tensor container ("GCDT").

Layout of one record::

    b"GCDT" | u8 version | u8 dtype | u8 rank | rank x u64 dims (LE) | payload

The payload is row-major little-endian. dtype 0 is float32; dtype 1 (float64)
and 2 (int64) are extensions used by checkpoints so parameters round-trip
bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GCDT"
VERSION = 1
MAX_RANK = 8

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class BlobError(ValueError):
    pass


class BadMagicError(BlobError):
    pass


class TruncatedBlobError(BlobError):
    pass


class DimOverflowError(BlobError):
    pass


class UnsupportedBlobError(BlobError):
    pass


def header_size(rank: int) -> int:
    return 4 + 3 + 8 * rank


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise UnsupportedBlobError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise DimOverflowError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; return (array, next_offset)."""
    view = memoryview(buf)
    if len(view) - offset < 7:
        raise TruncatedBlobError("header shorter than 7 bytes")
    if bytes(view[offset:offset + 4]) != MAGIC:
        raise BadMagicError("bad magic")
    version, code, rank = struct.unpack_from("<BBB", view, offset + 4)
    if version != VERSION:
        raise UnsupportedBlobError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedBlobError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise DimOverflowError(f"rank {rank} exceeds {MAX_RANK}")
    pos = offset + 7
    if len(view) - pos < 8 * rank:
        raise TruncatedBlobError("dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", view, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
        if count * dtype.itemsize >= 2**63:
            raise DimOverflowError(f"dims {dims} overflow")
    nbytes = count * dtype.itemsize
    if len(view) - pos < nbytes:
        raise TruncatedBlobError(f"payload needs {nbytes} bytes, {len(view) - pos} available")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims).copy()
    return arr, pos + nbytes


def decode_single(buf: bytes) -> np.ndarray:
    arr, end = decode(buf)
    if end != len(buf):
        raise BlobError(f"{len(buf) - end} trailing bytes after tensor")
    return arr
