"""Binary parameter container shared by the embedder and the VIS model.

Layout (all integers little-endian)::

    magic        8 bytes   b"SSHOTCKP"
    version      uint32
    desc_len     uint32
    descriptor   desc_len bytes of UTF-8 JSON (architecture, config, extra state)
    count        uint32
    count x record:
        name_len uint16, name bytes (UTF-8)
        dtype    uint8   (0 = float32, 1 = int64)
        ndim     uint8
        shape    ndim x uint32
        payload  little-endian values
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"SSHOTCKP"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return arr.astype("<i8")
    return arr.astype("<f4")


def dumps(tensors: Mapping[str, Any], descriptor: Mapping[str, Any]) -> bytes:
    buf = io.BytesIO()
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        code = 1 if arr.dtype == np.dtype("<i8") else 0
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    version, desc_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    descriptor = json.loads(data[pos:pos + desc_len].decode("utf-8"))
    pos += desc_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor record")
    return tensors, descriptor


def save(path, tensors: Mapping[str, Any], descriptor: Mapping[str, Any]) -> str:
    """Write a container and return its fingerprint."""
    data = dumps(tensors, descriptor)
    Path(path).write_bytes(data)
    return fingerprint_bytes(data)


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def fingerprint_file(path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


def state_dict_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: _to_numpy(v) for k, v in module.state_dict().items()}


def load_state_dict(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    own = module.state_dict()
    state = {}
    for k, ref in own.items():
        if prefix + k not in tensors:
            raise CheckpointError(f"missing tensor {prefix + k!r}")
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {prefix + k!r}: {arr.shape} vs {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state)
