"""Binary container for named float64 arrays tagged with a config digest.

Layout (all integers little-endian): ``ADFF`` magic, u32 version, 32-byte
digest, u32 entry count, then per entry a u16 name length, the UTF-8 name,
a u8 rank, rank u32 dims and the row-major float64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numeric import ParameterSet

MAGIC = b"ADFF"
VERSION = 1
DIGEST_BYTES = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterSet
    digest: bytes
    version: int = VERSION


def dumps_checkpoint(params: ParameterSet, digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError(f"digest must be {DIGEST_BYTES} bytes, got {len(digest)}")
    names = params.names()
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        arr = params[name]
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_checkpoint(blob: bytes, expected_digest: bytes | None = None) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(DIGEST_BYTES)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written under a different configuration")
    (count,) = r.unpack("<I")
    params = ParameterSet()
    for _ in range(count):
        (length,) = r.unpack("<H")
        name = r.take(length).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        params.add(name, arr)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the last entry")
    return Checkpoint(params, digest, version)


def save_checkpoint(path: str | Path, params: ParameterSet, digest: bytes) -> None:
    Path(path).write_bytes(dumps_checkpoint(params, digest))


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expected_digest)
