"""Checkpoint files.

Layout::

    b"LGCKPT" | u16 version | u32 manifest length | JSON manifest | payloads

The manifest records the model config, the training step, free-form metadata
and, for each tensor in payload order, its name, shape, byte offset and byte
length. Payloads are little-endian float32. Optimizer moments travel as extra
tensors named ``opt.m.<param>`` / ``opt.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    step: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file then rename) so a crash never leaves half a file."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(_to_numpy(arr), dtype="<f4")
        if not np.isfinite(data).all():
            raise CheckpointError(f"refusing to save non-finite tensor {name}")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"config": ckpt.model_config, "step": ckpt.step, "meta": ckpt.meta, "tensors": entries},
        sort_keys=True,
    ).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    version, size = struct.unpack_from("<HI", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 6
    manifest = json.loads(buf[start : start + size])
    base = start + size
    tensors = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype="<f4", count=e["nbytes"] // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(manifest["config"], manifest["step"], tensors, manifest.get("meta", {}))


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().to(torch.float32).numpy()
    return np.asarray(x)


def model_tensors(model) -> dict[str, np.ndarray]:
    return {name: _to_numpy(p) for name, p in model.named_parameters()}


def load_into(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy named tensors into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing}")
    with torch.no_grad():
        for name, p in params.items():
            src = tensors[name]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: checkpoint shape {tuple(src.shape)} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(src, dtype=np.float32)).to(p.dtype))


def restore_model(path):
    """Rebuild a model from a checkpoint file. Returns (model, checkpoint)."""
    from .model import ModelConfig, init

    ckpt = load(path)
    model = init(ModelConfig.from_dict(ckpt.model_config))
    load_into(model, ckpt.tensors)
    return model, ckpt
