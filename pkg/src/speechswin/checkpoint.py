"""Little-endian checkpoint container for named parameter tensors.

Layout::

    magic      8 bytes   b"SSWINCKP"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (model config + extras)
    count      u32
    count x tensor records:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u8,  ndim x u32 dims
        raw data, little-endian, C order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig

MAGIC = b"SSWINCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def dumps(cfg: ModelConfig, tensors: Dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    meta = json.dumps({"model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Tuple[ModelConfig, Dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelConfig.from_dict(meta["model"]), tensors, meta.get("extra", {})


def save(path, cfg: ModelConfig, tensors: Dict[str, np.ndarray], extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(cfg, tensors, extra))


def load(path) -> Tuple[ModelConfig, Dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
