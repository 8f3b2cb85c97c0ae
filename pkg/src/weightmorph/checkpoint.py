"""Binary checkpoint container for named float32 tensors plus text metadata.

Layout, all integers little-endian:

    magic   4 bytes  b"NMWT"
    version u32      currently 1
    meta    u32 byte length, then UTF-8 "key=value" lines separated by LF
    count   u32      number of tensors
    per tensor:
        name   u32 byte length + UTF-8 bytes
        rank   u32
        dims   rank x u64
        dtype  u8 (0 = float32)
        data   prod(dims) x 4 bytes, raw little-endian float32

Round-trips are bit-exact. Writes go to a temporary file in the target
directory and are renamed into place, so a crash never leaves a partial
checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NMWT"
VERSION = 1
DTYPE_F32 = 0


class CorruptCheckpointError(ValueError):
    """The file is not a well-formed checkpoint."""


@dataclass
class Checkpoint:
    """Loaded checkpoint: string metadata and name -> float32 array."""

    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.metadata.get("kind", "")


def _encode_metadata(metadata: dict) -> bytes:
    lines = []
    for k, v in metadata.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata key/value not encodable: {k!r}={v!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptCheckpointError(f"metadata is not UTF-8: {e}") from None
    meta = {}
    if not text:
        return meta
    for line in text.split("\n"):
        if "=" not in line:
            raise CorruptCheckpointError(f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def save_checkpoint(path, tensors: dict, metadata: dict) -> None:
    """Write atomically: serialize to <path>.tmp.<pid>, then rename."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_blob = _encode_metadata(metadata)
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        name_b = str(name).encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<Q", d))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)

    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CorruptCheckpointError(
                f"truncated while reading {what} at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read {path}: {e}") from None
    r = _Reader(blob)

    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    meta = _decode_metadata(r.take(r.u32("metadata length"), "metadata"))

    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name_b = r.take(r.u32("name length"), f"tensor {i} name")
        try:
            name = name_b.decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError(f"tensor {i}: name is not UTF-8") from None
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise CorruptCheckpointError(f"{name}: implausible rank {rank}")
        dims = tuple(r.u64(f"{name} dim {d}") for d in range(rank))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem > 1 << 32:
            raise CorruptCheckpointError(f"{name}: implausible element count {n_elem}")
        dtype = r.u8(f"{name} dtype")
        if dtype != DTYPE_F32:
            raise CorruptCheckpointError(f"{name}: unknown dtype code {dtype}")
        raw = r.take(4 * n_elem, f"{name} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(
            np.float32, copy=True)

    if r.pos != len(blob):
        raise CorruptCheckpointError(f"{len(blob) - r.pos} trailing bytes after tensors")
    return Checkpoint(metadata=meta, tensors=tensors)


def file_hash8(path) -> str:
    """First 8 hex digits of the file's SHA-256, used to tag derived outputs."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:8]
