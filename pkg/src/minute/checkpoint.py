"""Named-tensor checkpoint files.

Layout (all integers little-endian): u32 tensor count, then per tensor a
u16 name length, the UTF-8 name, u8 rank, u32 per-axis dims, and the
float32 row-major data. Whatever follows the last tensor is a JSON footer
(config, seed, anything the writer wants to remember).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(Exception):
    pass


def save_tensors(path: Path, tensors: dict[str, np.ndarray], footer: dict) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            if arr.ndim:
                arr = np.ascontiguousarray(arr)  # keeps 0-d arrays rank 0
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"tensor rank {arr.ndim} too large: {name}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(json.dumps(footer, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def load_tensors(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n_values), dtype="<f4").reshape(dims).copy()
        tensors[name] = data
    footer_bytes = bytes(view[off:])
    try:
        footer = json.loads(footer_bytes.decode("utf-8")) if footer_bytes else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad JSON footer") from e
    return tensors, footer
