"""Flat binary checkpoints.

Layout: the magic ``DFCKPT1\\n``, then for each tensor in model-definition
order a u32 name length, the UTF-8 name, a u64 element count and that many
float64 values, all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DFCKPT1\n"


def encode(items) -> bytes:
    chunks = [MAGIC]
    for name, arr in items:
        raw_name = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<Q", flat.size))
        chunks.append(flat.tobytes())
    return b"".join(chunks)


def decode(raw: bytes) -> list[tuple[str, np.ndarray]]:
    if not raw.startswith(MAGIC):
        raise FormatError("not a checkpoint: bad magic bytes")
    pos = len(MAGIC)
    out = []
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (count,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
        except struct.error as exc:
            raise FormatError("truncated checkpoint header") from exc
        end = pos + 8 * count
        if end > len(raw):
            raise FormatError(f"truncated data for {name!r}")
        out.append((name, np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)))
        pos = end
    return out


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(encode(model.state_items()))


def load_checkpoint(model, path) -> None:
    """Copy stored values into ``model`` in place; names and sizes must match exactly."""
    stored = decode(Path(path).read_bytes())
    expected = model.state_items()
    if [n for n, _ in stored] != [n for n, _ in expected]:
        raise FormatError("checkpoint tensors do not match the model definition")
    for (name, values), (_, target) in zip(stored, expected):
        if values.size != target.size:
            raise FormatError(f"{name}: {values.size} values stored, model has {target.size}")
        target[...] = values.reshape(target.shape)
