"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"FXCK" | u32 version | u32 n_meta | meta JSON (utf-8) | u32 n_tensors |
    n_tensors x { u16 n_path | path | u8 n_dtype | dtype str | u8 ndim | u64[ndim] shape |
                  u64 n_bytes | payload (C order) }

Tensor paths are prefixed ``model.`` for parameters and ``optim.`` for the
Adam moments. The JSON metadata carries stage, epoch, best validation value,
the resolved config and its hash.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FXCK"
VERSION = 1


class CheckpointError(ValueError):
    """File is not a readable checkpoint or does not fit the model."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def optim_state(self) -> dict[str, np.ndarray]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("optim.")}

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 0))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.array(ckpt.tensors[name], order="C", copy=True)
        p = name.encode()
        dt = arr.dtype.newbyteorder("<").str.encode()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts += [struct.pack("<H", len(p)), p, struct.pack("<B", len(dt)), dt,
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  struct.pack("<Q", arr.nbytes), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    try:
        version, n_meta = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(blob[pos:pos + n_meta].decode())
        pos += n_meta
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (lp,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + lp].decode()
            pos += lp
            (ld,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dtype = np.dtype(blob[pos:pos + ld].decode())
            pos += ld
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(tensors, meta)
