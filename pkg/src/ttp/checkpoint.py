"""Named-tensor checkpoint files.

Layout: magic "TTPW", version u16, then one record per tensor in sorted
name order: name length u16, name bytes (utf-8), rank u8, dims u32 each,
f32 little-endian data. No padding anywhere.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TTPW"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, tensors: dict):
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict:
    """Read tensors back as float64 arrays keyed by name."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    if len(data) < 6:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")

    tensors = {}
    offset = 6
    while offset < len(data):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
        except struct.error as exc:
            raise CheckpointError("truncated tensor record") from exc
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError("truncated tensor data")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(dims).astype(np.float64)
        offset = end
    return tensors
