"""Checkpoint files: a JSON header followed by PTNS tensor blocks.

Layout: b"PGCK", u16 version, u32 header length, UTF-8 JSON header, then one
PTNS block per entry of ``header["tensors"]`` in that order. Noise masks are
never written; they are re-derived from their keys.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ptns

MAGIC = b"PGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class HashMismatchError(CheckpointError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


@dataclass
class Checkpoint:
    iteration: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)  # config echo, hashes, mask seed, stream state

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def equals(self, other: "Checkpoint") -> bool:
        return (self.iteration == other.iteration and self.meta == other.meta
                and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(v, other.tensors[k], equal_nan=True)
                        for k, v in self.tensors.items()))


def to_bytes(ck: Checkpoint) -> bytes:
    header = {"version": VERSION, "iteration": ck.iteration, "meta": ck.meta,
              "tensors": list(ck.tensors)}
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(hbytes)))
    buf.write(hbytes)
    for arr in ck.tensors.values():
        ptns.write_tensor(buf, arr)
    return buf.getvalue()


def from_bytes(data: bytes, arch_hash: str | None = None) -> Checkpoint:
    fh = io.BytesIO(data)
    if fh.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    head = fh.read(6)
    if len(head) != 6:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<HI", head)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    header = json.loads(fh.read(hlen).decode())
    meta = header["meta"]
    if arch_hash is not None and meta.get("arch_hash") != arch_hash:
        raise HashMismatchError(
            f"architecture hash mismatch: checkpoint has {meta.get('arch_hash')}, "
            f"architecture file has {arch_hash}")
    tensors = {}
    for name in header["tensors"]:
        try:
            tensors[name] = ptns.read_tensor(fh)
        except ptns.FormatError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from None
    return Checkpoint(header["iteration"], tensors, meta)


def save(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ck))


def load(path, arch_path=None) -> Checkpoint:
    """Load a checkpoint; with ``arch_path`` the architecture file hash must match."""
    with open(path, "rb") as fh:
        data = fh.read()
    return from_bytes(data, file_hash(arch_path) if arch_path is not None else None)


def checkpoint_roundtrip(ck: Checkpoint, path) -> Checkpoint:
    save(ck, path)
    return load(path)
