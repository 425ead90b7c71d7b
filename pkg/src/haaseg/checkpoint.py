"""Binary weight checkpoints.

Layout: the ASCII header line ``HAASEG1\\n``, a little-endian uint32
record count, then per tensor: uint32 name length, UTF-8 name bytes,
uint32 rank, uint32 extents, and the raw little-endian float64 payload.
The reader validates that the records consume the file exactly, so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

MAGIC = b"HAASEG1\n"


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def save_checkpoint(path, items: Iterable[Tuple[str, np.ndarray]]) -> None:
    items = list(items)
    chunks: List[bytes] = [MAGIC, struct.pack("<I", len(items))]
    for name, data in items:
        raw = name.encode("utf-8")
        arr = np.asarray(data, dtype="<f8")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing {MAGIC!r} header")
    off = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "record count"))
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = take(name_len, f"record {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n, f"{name} payload"), dtype="<f8")
        out[name] = data.reshape(shape).copy()
    if off != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - off} trailing bytes after {count} records"
        )
    return out
