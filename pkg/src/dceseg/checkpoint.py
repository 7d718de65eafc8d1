"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian u32, all floats little-endian f32):

    magic "DCSG" | format version | tensor count
    per tensor: name length | UTF-8 name | rank | dims[rank] | values

Learned parameters are stored under their plain names. Non-learned entries
(batch-norm running statistics, their update counters, optimizer moments and
the training step/iteration counters) are recognizable by name: they contain
``.running_`` or ``.updates`` or live under the ``opt.`` / ``train.``
prefixes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCSG"
FORMAT_VERSION = 1

_NON_LEARNED_MARKERS = (".running_mean", ".running_var", ".updates")
_NON_LEARNED_PREFIXES = ("opt.", "train.")


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def is_learned(name: str) -> bool:
    if name.startswith(_NON_LEARNED_PREFIXES):
        return False
    return not any(marker in name for marker in _NON_LEARNED_MARKERS)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in insertion order (deterministic bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        # note: ascontiguousarray would promote rank-0 tensors to rank 1
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float32 array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated after {offset} bytes")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = values.copy()
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors
