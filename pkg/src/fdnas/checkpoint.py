"""Versioned binary checkpoint files.

Layout, little-endian::

    b"FDCK" | u32 version | u32 round | u32 header length | header JSON (UTF-8)
    u32 entry count | entries sorted by id

    entry: u16 id length | id (UTF-8) | u8 ndim | u32 dims... | float64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FDCK"
VERSION = 1


@dataclass
class Checkpoint:
    round: int
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix/`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<III", VERSION, ckpt.round, len(header)), header,
           struct.pack("<I", len(ckpt.arrays))]
    for key in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[key], dtype="<f8", order="C")
        kb = key.encode()
        out.append(struct.pack("<H", len(kb)) + kb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    def need(off, n):
        if off + n > len(blob):
            raise ValueError(f"{source}: truncated at byte {len(blob)}, needed {off + n}")

    need(0, 16)
    if blob[:4] != MAGIC:
        raise ValueError(f"{source}: bad magic {blob[:4]!r}")
    version, rnd, hlen = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {version}")
    off = 16
    need(off, hlen + 4)
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(count):
        need(off, 2)
        (klen,) = struct.unpack_from("<H", blob, off)
        need(off + 2, klen + 1)
        key = blob[off + 2:off + 2 + klen].decode()
        ndim = blob[off + 2 + klen]
        off += 3 + klen
        need(off, 4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        need(off, 8 * size)
        arrays[key] = np.frombuffer(blob, "<f8", size, off).reshape(dims).astype(np.float64)
        off += 8 * size
    if off != len(blob):
        raise ValueError(f"{source}: {len(blob) - off} trailing bytes")
    return Checkpoint(rnd, header, arrays)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))
