"""PTNS tensor serialization: b"PTNS", u16 version, u16 rank, u64 extents, f64 data (all LE)."""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"PTNS"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    # asarray, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
    arr = np.asarray(array, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<HH", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated header")
    version, rank = struct.unpack("<HH", head)
    if version != VERSION:
        raise FormatError(f"unsupported PTNS version {version}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise FormatError("truncated data")
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)


def to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
