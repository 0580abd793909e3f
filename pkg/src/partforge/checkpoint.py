"""Versioned binary checkpoint container.

Layout: magic ``PFCK``, u32 LE version, u32 JSON length + UTF-8 metadata
(includes the model config), u32 tensor count, then per tensor: u16 name
length + name, u8 ndim, ndim u32 dims, float32 little-endian data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .dit import ModelConfig, PartDiT

MAGIC = b"PFCK"
VERSION = 1


def save_tensors(path: str | Path, meta: dict, tensors: dict) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    items = sorted(tensors.items())
    out += struct.pack("<I", len(items))
    for name, tensor in items:
        arr = tensor.detach().cpu().numpy().astype("<f4") if isinstance(tensor, torch.Tensor) \
            else np.asarray(tensor, dtype="<f4")
        name_b = name.encode("utf-8")
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_tensors(path: str | Path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", data[8:12])
    offset = 12
    meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack("<I", data[offset : offset + 4])
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", data[offset : offset + 2])
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        ndim = data[offset]
        offset += 1
        shape = struct.unpack(f"<{ndim}I", data[offset : offset + 4 * ndim])
        offset += 4 * ndim
        n_elem = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data[offset : offset + 4 * n_elem], dtype="<f4").reshape(shape)
        offset += 4 * n_elem
        tensors[name] = torch.from_numpy(arr.copy())
    return meta, tensors


def save_model(path: str | Path, model: PartDiT, stage: dict | None = None,
               extra_tensors: dict | None = None) -> None:
    """Model parameters (prefix ``model.``) plus stage metadata and extras."""
    meta = {"model_config": model.config.to_json(), "stage": stage or {}}
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    save_tensors(path, meta, tensors)


def load_model(path: str | Path) -> tuple[PartDiT, dict, dict]:
    """Returns (model, stage metadata, non-model tensors)."""
    meta, tensors = load_tensors(path)
    config = ModelConfig.from_json(meta["model_config"])
    model = PartDiT(config)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.eval()
    extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, meta.get("stage", {}), extra
