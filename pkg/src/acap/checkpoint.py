"""ACAP named-tensor checkpoint files.

Layout (little endian)::

    b"ACAP" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f64) | u8 rank
                | u32 dims[rank] | row-major payload
    u64 checksum of every preceding byte

The checksum field holds zlib's CRC-32 zero-extended to 64 bits.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"ACAP"
VERSION = 1
DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.array(arr, dtype="<f8", order="C")
        if a.ndim > 255:
            raise CheckpointError(f"rank too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F64, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> Dict[str, np.ndarray]:
    if len(raw) < 4 + 8 + 8 or raw[:4] != MAGIC:
        raise CheckpointError("not an ACAP checkpoint (bad magic or truncated)")
    body, (crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is corrupted or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            dtype, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != DTYPE_F64:
                raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: payload truncated")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name}")
            out[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated header: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return out


def checkpoint_size(shapes: Mapping[str, tuple]) -> int:
    """Exact file size for tensors of the given names and shapes."""
    size = 4 + 4 + 4 + 8
    for name, shape in shapes.items():
        size += 2 + len(name.encode("utf-8")) + 2 + 4 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))
    return size


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def save_checkpoint(model, path, meta: dict = None) -> None:
    """Write the model's parameters and buffers; ``meta`` goes to a JSON sidecar."""
    save_tensors(path, model.state_dict())
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_meta(path) -> dict:
    mp = meta_path(path)
    if not mp.is_file():
        raise CheckpointError(f"{path}: missing metadata sidecar {mp.name}")
    return json.loads(mp.read_text())
