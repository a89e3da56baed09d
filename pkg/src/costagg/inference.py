"""Full-image prediction: resize, sliding-window tiling, overlap averaging."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import resize_image
from .errors import ConfigError
from .upsample import argmax_labels


@dataclass(frozen=True)
class SlidingWindowConfig:
    eval_resolution: int | None = 512
    window: int = 224
    stride: int = 112

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be positive")
        if not 1 <= self.stride <= self.window:
            raise ConfigError(f"stride must lie in [1, window={self.window}], got {self.stride}")
        if self.eval_resolution is not None and self.window > self.eval_resolution:
            raise ConfigError(f"window {self.window} exceeds eval resolution {self.eval_resolution}")


def window_positions(extent: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last one is clamped to ``extent - window``."""
    if window > extent:
        raise ConfigError(f"window {window} larger than extent {extent}")
    last = extent - window
    out = []
    for off in range(0, extent, stride):
        off = min(off, last)
        if not out or out[-1] != off:
            out.append(off)
        if off == last:
            break
    return out


def coverage_count(height: int, width: int, window: int, stride: int) -> np.ndarray:
    count = np.zeros((height, width), dtype=np.int64)
    for y in window_positions(height, window, stride):
        for x in window_positions(width, window, stride):
            count[y:y + window, x:x + window] += 1
    return count


def _as_batch(image: torch.Tensor) -> torch.Tensor:
    return image[None] if image.dim() == 3 else image


@torch.no_grad()
def sliding_window_scores(image: torch.Tensor, model, embeddings: torch.Tensor, window: int,
                          stride: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of per-window scores over a ``(1, 3, H, W)`` image that is at least one window large.

    Returns merged scores ``(1, M, H, W)`` and the per-pixel window count ``(H, W)``.
    """
    _, _, H, W = image.shape
    M = embeddings.shape[0]
    acc = image.new_zeros(1, M, H, W)
    count = image.new_zeros(H, W)
    for y in window_positions(H, window, stride):
        for x in window_positions(W, window, stride):
            tile = image[:, :, y:y + window, x:x + window]
            acc[:, :, y:y + window, x:x + window] += model(tile, embeddings=embeddings)
            count[y:y + window, x:x + window] += 1
    return acc / count, count


def _reflect_pad(image: torch.Tensor, target_h: int, target_w: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Centre ``image`` in a ``target`` canvas using reflect padding; returns the canvas and offset."""
    _, _, H, W = image.shape
    top, left = (max(target_h - H, 0)) // 2, (max(target_w - W, 0)) // 2
    pad = ((0, 0), (0, 0), (top, max(target_h - H, 0) - top), (left, max(target_w - W, 0) - left))
    # numpy handles reflection widths larger than the image by repeating
    arr = np.pad(image.cpu().numpy(), pad, mode="reflect" if min(H, W) > 1 else "edge")
    return torch.from_numpy(arr).to(image), (top, left)


@torch.no_grad()
def predict_scores(image: torch.Tensor, model, class_names: Sequence[str] | None = None,
                   cfg: SlidingWindowConfig = SlidingWindowConfig(),
                   embeddings: torch.Tensor | None = None) -> torch.Tensor:
    """Merged class scores at evaluation resolution, ``(1, M, He, We)``."""
    model.eval()
    image = _as_batch(image)
    if embeddings is None:
        embeddings = model.embed_classes(class_names)
    if cfg.eval_resolution is not None:
        image = resize_image(image, (cfg.eval_resolution, cfg.eval_resolution))
    _, _, H, W = image.shape
    if H < cfg.window or W < cfg.window:
        canvas, (top, left) = _reflect_pad(image, max(H, cfg.window), max(W, cfg.window))
        scores, _ = sliding_window_scores(canvas, model, embeddings, cfg.window, cfg.stride)
        return scores[:, :, top:top + H, left:left + W]
    scores, _ = sliding_window_scores(image, model, embeddings, cfg.window, cfg.stride)
    return scores


@torch.no_grad()
def predict_full(image: torch.Tensor, model, class_names: Sequence[str] | None = None,
                 cfg: SlidingWindowConfig = SlidingWindowConfig(),
                 embeddings: torch.Tensor | None = None) -> torch.Tensor:
    """Label map ``(H, W)`` at the input image's original resolution."""
    image = _as_batch(image)
    H, W = image.shape[-2:]
    labels = argmax_labels(predict_scores(image, model, class_names, cfg, embeddings))
    if tuple(labels.shape[-2:]) != (H, W):
        labels = F.interpolate(labels[:, None].float(), size=(H, W), mode="nearest")[:, 0].long()
    return labels[0]
