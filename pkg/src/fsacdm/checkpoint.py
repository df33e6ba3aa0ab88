"""Binary checkpoint format: named float64 tensors with a CRC trailer.

Layout, all little-endian:

    magic   4 bytes  "FSAC"
    version u32      currently 1
    count   u32      number of tensors
    entry * count:
        name_len u32, name utf-8 bytes
        rank     u32, dims rank * u64
        payload  float64 * prod(dims)
    crc32   u32      over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FSAC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, corrupted, or incompatible checkpoint file."""


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors; accepts torch tensors or numpy arrays.

    The file is written to a temporary sibling and renamed into place, so
    an interrupted save never clobbers the previous checkpoint.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name-to-array dict, verifying the CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupted")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or malformed ({e})") from None
    if off != len(blob) - 4:
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out


def load_into_model(path, model: torch.nn.Module) -> dict[str, np.ndarray]:
    """Restore model parameters from a checkpoint, validating names/shapes.

    Returns the full tensor dict so callers can pick up optimizer state
    and counters stored alongside the parameters.
    """
    data = load_checkpoint(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(data))
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {', '.join(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            arr = data[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"file {tuple(arr.shape)} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return data
