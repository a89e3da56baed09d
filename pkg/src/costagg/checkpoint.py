"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       8 bytes  b"CAGGCKPT"
    version     u32      currently 1
    meta_len    u32      length of the JSON metadata that follows
    meta        bytes    UTF-8 JSON (model config and free-form extras)
    n_tensors   u32
    n_tensors times:
        name_len  u16, name (UTF-8)
        ndim      u8,  dims (u32 each)
        data      prod(dims) float32 values, C order

The metadata lets a checkpoint rebuild its model without any other file.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CostAggError
from .model import ModelConfig, SegmentationModel

MAGIC = b"CAGGCKPT"
VERSION = 1


class CheckpointError(CostAggError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if off + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
        if off != len(buf):
            raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return tensors, meta


def save_checkpoint(model: SegmentationModel, path: str | Path, extra: dict | None = None) -> Path:
    meta = {"model": model.cfg.to_dict(), "templates": list(model.templates.templates)}
    if extra:
        meta["extra"] = extra
    return save_tensors(path, dict(model.state_dict()), meta)


def load_checkpoint(path: str | Path) -> SegmentationModel:
    from .vocab import PromptTemplateSet

    tensors, meta = load_tensors(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
        templates = PromptTemplateSet(tuple(meta["templates"])) if "templates" in meta else None
        model = SegmentationModel(cfg, templates)
        model.load_state_dict(tensors)
    except (KeyError, TypeError, RuntimeError, CostAggError) as e:
        raise CheckpointError(f"{path}: checkpoint does not describe a valid model ({e})") from e
    model.eval()
    return model
