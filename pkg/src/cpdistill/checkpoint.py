"""Binary parameter serialization.

Layout (little-endian throughout):

    magic "CPCKPT01" | u32 format version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 dims[rank]
               | f32 payload (row-major)
    u32 CRC32 over the whole entries region

Round trips are bit-exact. Model checkpoints store the architecture, the
schedule, and (for students) the distillation configuration as reserved
scalar entries so a file is self-describing.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

MAGIC = b"CPCKPT01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, truncated, or mismatched checkpoint file."""


def _to_f32_array(t: Tensor | np.ndarray | float) -> np.ndarray:
    if isinstance(t, Tensor):
        arr = t.detach().cpu().to(torch.float32).numpy()
    else:
        arr = np.asarray(t, dtype=np.float32)
    return np.ascontiguousarray(arr, dtype=np.float32)


def save_params(entries: Mapping[str, Tensor | np.ndarray | float], path) -> None:
    body = bytearray()
    for name, value in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        arr = _to_f32_array(value)
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry rank too large for {name!r}")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f4").tobytes()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(entries))
    blob += bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


def load_params(path) -> "OrderedDict[str, Tensor]":
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated header")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body = blob[len(MAGIC) + 8 : -4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupted")
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    off = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = body[off : off + 4 * n]
            if len(payload) != 4 * n:
                raise struct.error("payload short")
            off += 4 * n
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: truncated or malformed entry: {e}") from e
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        out[name] = torch.from_numpy(arr)
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after entries")
    return out


def load_into(module: torch.nn.Module, params: Mapping[str, Tensor]) -> None:
    """Copy a loaded ParamSet into an architecture, validating the key sets."""
    own = dict(module.named_parameters())
    for name in own:
        if name not in params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
    for name in params:
        if name not in own:
            raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
    with torch.no_grad():
        for name, p in own.items():
            src = params[name]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)}"
                    f" vs architecture {tuple(p.shape)}"
                )
            p.copy_(src.to(p.dtype))


def scalar(params: Mapping[str, Tensor], name: str) -> float:
    if name not in params:
        raise CheckpointError(f"checkpoint is missing scalar entry {name!r}")
    return float(params[name].reshape(-1)[0])
