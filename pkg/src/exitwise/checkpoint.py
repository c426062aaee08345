"""Binary tensor-table container used for model checkpoints and corpus caches.

Layout (all integers little-endian):

    8 bytes   magic "EXITWSE1"
    u32       format version
    u32       architecture hash
    u32       tensor count
    per tensor:
        u32       name length, then that many UTF-8 bytes
        u8        rank
        u64 * r   extents
        f32 * n   payload, little-endian, row-major

Round-trips are bit-exact: payloads are written as raw float32 and read back
without conversion.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointTruncatedError

MAGIC = b"EXITWSE1"
VERSION = 1


def arch_hash(description) -> int:
    """Stable u32 fingerprint of an architecture description (any JSON-able value)."""
    blob = json.dumps(description, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return zlib.crc32(blob) & 0xFFFFFFFF


def write_tensor_file(path, tensors: dict[str, np.ndarray], architecture: int) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, architecture, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _take(buf: memoryview, offset: int, n: int) -> tuple[memoryview, int]:
    if offset + n > len(buf):
        raise CheckpointTruncatedError(f"file ends at byte {len(buf)}, needed {offset + n}")
    return buf[offset : offset + n], offset + n


def read_tensor_file(path) -> tuple[int, int, dict[str, np.ndarray]]:
    """Parse a container; returns (version, architecture hash, name -> float32 array).

    The whole file is validated before anything is returned, so a truncated
    file never yields a partial table.
    """
    raw = memoryview(Path(path).read_bytes())
    chunk, off = _take(raw, 0, len(MAGIC))
    if bytes(chunk) != MAGIC:
        raise CheckpointFormatError(f"bad magic {bytes(chunk)!r}, expected {MAGIC!r}")
    chunk, off = _take(raw, off, 12)
    version, architecture, count = struct.unpack("<III", chunk)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}, expected {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = _take(raw, off, 4)
        (name_len,) = struct.unpack("<I", chunk)
        chunk, off = _take(raw, off, name_len)
        name = bytes(chunk).decode("utf-8")
        chunk, off = _take(raw, off, 1)
        rank = chunk[0]
        chunk, off = _take(raw, off, 8 * rank)
        extents = struct.unpack(f"<{rank}Q", chunk)
        n = 1
        for e in extents:
            n *= e
        chunk, off = _take(raw, off, 4 * n)
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(extents).copy()
    if off != len(raw):
        raise CheckpointFormatError(f"{len(raw) - off} trailing bytes after tensor table")
    return version, architecture, tensors
