"""Cosine-similarity cost volume between dense image descriptors and class embeddings."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DegenerateVectorError, ShapeError

_EPS = 1e-12


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _EPS or nb <= _EPS:
        raise DegenerateVectorError("cosine similarity of a zero-magnitude vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm <= _EPS).any()):
        raise DegenerateVectorError(f"zero-magnitude {what} in cost volume input")
    return x / norm


def build_cost_volume(field: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every descriptor cell with every class embedding.

    Args:
        field: dense descriptors, ``(B, h, w, C)`` or ``(h, w, C)``.
        embeddings: ``(M, C)`` class text embeddings in vocabulary order.

    Returns:
        ``(B, M, h, w)`` (or ``(M, h, w)`` for unbatched input) with values in [-1, 1].
    """
    unbatched = field.dim() == 3
    if unbatched:
        field = field[None]
    if field.dim() != 4 or embeddings.dim() != 2:
        raise ShapeError(f"expected field (B, h, w, C) and embeddings (M, C), got "
                         f"{tuple(field.shape)} and {tuple(embeddings.shape)}")
    if embeddings.shape[0] < 1:
        raise ShapeError("need at least one class embedding")
    if field.shape[-1] != embeddings.shape[-1]:
        raise ShapeError(f"descriptor width {field.shape[-1]} != embedding width {embeddings.shape[-1]}")
    f = _normalize(field, "descriptor")
    t = _normalize(embeddings.to(field.dtype), "embedding")
    vol = torch.einsum("bhwc,mc->bmhw", f, t).clamp(-1.0, 1.0)
    return vol[0] if unbatched else vol


def minmax_to_uint8(m: np.ndarray) -> np.ndarray:
    """Scale one map to 0..255; a constant map becomes mid-gray."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        scaled = np.full(m.shape, 0.5)
    else:
        scaled = (m - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def export_costmaps(volume, out_dir: str | Path, ext: str = "png") -> list[Path]:
    """Write one min-max normalized grayscale image per class as ``costmap_<i>.<ext>``.

    ``volume`` is ``(M, h, w)``.
    """
    vol = volume.detach().cpu().numpy() if isinstance(volume, torch.Tensor) else np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"expected a (M, h, w) volume, got shape {vol.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(vol):
        p = out / f"costmap_{i}.{ext}"
        Image.fromarray(minmax_to_uint8(m)).save(p)
        paths.append(p)
    return paths
