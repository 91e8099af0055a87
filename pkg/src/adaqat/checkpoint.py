"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"ADAQATCK"
    version      u32       FORMAT_VERSION
    n_tensors    u32
    n_tensors x record:
        name_len u32, name (utf-8, name_len bytes)
        rank     u32, extents (rank x u32)
        data     prod(extents) x float32
    meta_len     u64
    meta         utf-8 JSON (controller, optimizer hyper-parameters, epoch,
                 iteration, RNG state, config echo, recorded metrics)

Optimizer momentum buffers are stored as ordinary tensor records under the
``optim.velocity/`` prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ADAQATCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{source}: not an adaqat checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format version {version} is not supported by this release "
            f"(expects {FORMAT_VERSION}); re-export it with the matching adaqat version or migrate it")
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        rank, = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    mlen, = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode("utf-8"))
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after metadata")
    return Checkpoint(tensors, meta, version)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, str(path))
