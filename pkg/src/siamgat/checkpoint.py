"""Flat binary checkpoint archive.

Layout (all integers little-endian)::

    b"SGCK" | u32 format_version | u32 n_entries
    n_entries x ( u32 name_len | name utf-8 | u32 ndim | i64[ndim] shape | f64[] data )

Entries are written in sorted name order so identical states give identical
bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    pos = 12
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            state[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return state


def save_checkpoint(path, state: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


def subset(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in state.items() if k.startswith(prefix)}
