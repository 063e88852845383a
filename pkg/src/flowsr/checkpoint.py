"""Binary checkpoint container.

Layout (all integers little-endian):

    magic "SFSR" | version u32 | sha256(meta_json) 32B | meta_len u32 |
    meta_json (canonical UTF-8) | tensor_count u32 |
    per tensor: name_len u32, name UTF-8, dtype tag u8 (1=f32, 2=f64),
                dims 4 x u32, raw little-endian payload |
    crc32 u32 over everything before it

Save -> load -> save is byte-identical: meta is canonicalized and tensor
order is preserved.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"SFSR"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class Checkpoint(NamedTuple):
    meta: dict
    tensors: dict[str, np.ndarray]


def _canonical_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_json = _canonical_meta(meta)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(meta_json).digest(),
             struct.pack("<I", len(meta_json)), meta_json,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise CheckpointError(f"tensor '{name}' must be rank-4, got shape {arr.shape}")
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", tag))
        parts.append(struct.pack("<4I", *arr.shape))
        parts.append(arr.astype(_TAG_DTYPES[tag], copy=False).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    body, crc_bytes = blob[:-4], blob[-4:]
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CheckpointError("checkpoint checksum failure")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    meta_json = r.take(r.u32())
    if hashlib.sha256(meta_json).digest() != digest:
        raise CheckpointError("checkpoint config digest mismatch")
    meta = json.loads(meta_json.decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dtype = _TAG_DTYPES.get(r.u8())
        if dtype is None:
            raise CheckpointError(f"unknown dtype tag for tensor '{name}'")
        shape = struct.unpack("<4I", r.take(16))
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return Checkpoint(meta, tensors)


def expect_meta(meta: dict, *, stage: str | None = None,
                final_scale: int | None = None) -> None:
    """Validate a loaded checkpoint against caller expectations."""
    if stage is not None and meta.get("stage") != stage:
        raise CheckpointError(f"stage mismatch: checkpoint is '{meta.get('stage')}', "
                              f"expected '{stage}'")
    if final_scale is not None and meta.get("final_scale") != final_scale:
        raise CheckpointError(f"scale mismatch: checkpoint final scale is "
                              f"x{meta.get('final_scale')}, expected x{final_scale}")
