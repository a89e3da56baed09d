"""Vision/text encoder interfaces, descriptor pooling, freezing and toy encoders.

Tensor layout conventions used throughout the package:

* images: ``(B, 3, H, W)`` floats in ``[0, 1]``
* patch tokens: ``(B, h, w, D)``; the global token: ``(B, D)``
* dense descriptors: ``(B, h, w, 2D)``
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterator, Protocol, Sequence, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


@dataclass
class VisionFeatures:
    cls: torch.Tensor
    patches: torch.Tensor
    patch_size: int

    def __post_init__(self):
        if self.cls.dim() != 2 or self.patches.dim() != 4:
            raise ShapeError(f"expected cls (B, D) and patches (B, h, w, D), got "
                             f"{tuple(self.cls.shape)} and {tuple(self.patches.shape)}")
        if self.cls.shape[0] != self.patches.shape[0] or self.cls.shape[-1] != self.patches.shape[-1]:
            raise ShapeError("cls and patch tokens disagree on batch size or width")

    @property
    def grid(self) -> tuple[int, int]:
        return self.patches.shape[1], self.patches.shape[2]

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def dim(self) -> int:
        return self.patches.shape[-1]


def pool_global(features: VisionFeatures) -> torch.Tensor:
    """Concatenate the global token with the average of all patch tokens, (B, 2D)."""
    mean = features.patches.flatten(1, 2).mean(dim=1)
    return torch.cat([features.cls, mean], dim=-1)


def dense_descriptors(features: VisionFeatures) -> torch.Tensor:
    """Per-patch analogue of :func:`pool_global`: cell (j, k) is ``[cls; f_jk]``."""
    b, h, w, _ = features.patches.shape
    cls = features.cls[:, None, None, :].expand(b, h, w, -1)
    return torch.cat([cls, features.patches], dim=-1)


@dataclass(frozen=True)
class FreezePolicy:
    last_two_vision_blocks_trainable: bool = True
    text_encoder_trainable: bool = False


# Rows of the freezing ablation, keyed by their row label.
FREEZE_ROWS = {
    "vision": FreezePolicy(True, False),
    "text": FreezePolicy(False, True),
    "both": FreezePolicy(True, True),
    "neither": FreezePolicy(False, False),
}


@runtime_checkable
class VisionEncoder(Protocol):
    """What a real backbone adapter has to provide.

    ``encode_image`` maps ``(B, 3, H, W)`` to :class:`VisionFeatures` on an
    ``(H / patch_size, W / patch_size)`` grid. ``trainable_parameters`` yields the
    tensors the freeze policy may unlock (the final blocks); everything else is frozen.
    """

    patch_size: int
    dim: int

    def encode_image(self, images: torch.Tensor) -> VisionFeatures: ...

    def trainable_parameters(self) -> Iterator[nn.Parameter]: ...


@runtime_checkable
class TextEncoder(Protocol):
    dim: int

    def encode(self, prompts: Sequence[str]) -> torch.Tensor: ...

    def trainable_parameters(self) -> Iterator[nn.Parameter]: ...


def check_divisible(h: int, w: int, patch_size: int) -> tuple[int, int]:
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    return h // patch_size, w // patch_size


def _init_linear(layer: nn.Linear, gen: torch.Generator, scale: float) -> None:
    with torch.no_grad():
        layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * scale / math.sqrt(layer.in_features))
        layer.bias.zero_()


class ToyVisionEncoder(nn.Module):
    """Deterministic stand-in for a ViT.

    Patches are flattened and sent through a fixed random projection (frozen, as
    buffers). A single trainable residual linear layer plays the part of the final
    two transformer blocks so the freezing policy has something to act on.
    """

    def __init__(self, dim: int = 32, patch_size: int = 16, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.patch_size = patch_size
        gen = torch.Generator().manual_seed(seed)
        fan_in = 3 * patch_size * patch_size
        self.register_buffer("patch_proj", torch.randn(fan_in, dim, generator=gen) / math.sqrt(fan_in))
        self.register_buffer("patch_bias", torch.randn(dim, generator=gen) * 0.5)
        self.register_buffer("cls_proj", torch.randn(dim, dim, generator=gen) / math.sqrt(dim))
        self.register_buffer("cls_bias", torch.randn(dim, generator=gen) * 0.5)
        self.last_blocks = nn.Linear(dim, dim)
        _init_linear(self.last_blocks, gen, 0.1)

    def encode_image(self, images: torch.Tensor) -> VisionFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        b, _, H, W = images.shape
        h, w = check_divisible(H, W, self.patch_size)
        x = (images - 0.5) / 0.25
        p = self.patch_size
        patches = x.reshape(b, 3, h, p, w, p).permute(0, 2, 4, 1, 3, 5).reshape(b, h, w, -1)
        f0 = patches @ self.patch_proj + self.patch_bias
        c0 = torch.tanh(f0.flatten(1, 2).mean(dim=1) @ self.cls_proj + self.cls_bias)
        return VisionFeatures(cls=c0 + self.last_blocks(c0), patches=f0 + self.last_blocks(f0),
                              patch_size=p)

    forward = encode_image

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return self.last_blocks.parameters()


def _token_bucket(token: str, buckets: int) -> int:
    # crc32 rather than hash(): str hashing is salted per process
    return zlib.crc32(token.encode("utf-8")) % buckets


class ToyTextEncoder(nn.Module):
    """Whitespace tokens hashed into a seeded table, mean-pooled, projected to ``dim``."""

    def __init__(self, dim: int = 64, token_dim: int = 32, buckets: int = 4096, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.buckets = buckets
        gen = torch.Generator().manual_seed(seed + 7919)
        self.register_buffer("table", torch.randn(buckets, token_dim, generator=gen))
        self.register_buffer("proj", torch.randn(token_dim, dim, generator=gen) / math.sqrt(token_dim))
        self.last_blocks = nn.Linear(dim, dim)
        _init_linear(self.last_blocks, gen, 0.1)

    def token_ids(self, prompt: str) -> list[int]:
        if not isinstance(prompt, str) or not prompt.strip():
            raise ValidationError("prompt is empty")
        return [_token_bucket(t, self.buckets) for t in prompt.lower().split()]

    def encode(self, prompts: Sequence[str]) -> torch.Tensor:
        if isinstance(prompts, str):
            raise ValidationError("encode expects a sequence of prompts; use encode_text for one")
        rows = [self.table[torch.tensor(self.token_ids(p))].mean(dim=0) for p in prompts]
        x = torch.stack(rows) @ self.proj
        return x + self.last_blocks(x)

    def encode_text(self, prompt: str) -> torch.Tensor:
        return self.encode([prompt])[0]

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return self.last_blocks.parameters()


def apply_freeze_policy(vision: VisionEncoder, text: TextEncoder, policy: FreezePolicy) -> None:
    """Set ``requires_grad`` on the unlockable encoder parameters."""
    for p in vision.trainable_parameters():
        p.requires_grad_(policy.last_two_vision_blocks_trainable)
    for p in text.trainable_parameters():
        p.requires_grad_(policy.text_encoder_trainable)


def resize_image(images: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``(B, 3, H, W)``; a no-op when the size already matches."""
    if tuple(images.shape[-2:]) == tuple(size):
        return images
    return F.interpolate(images, size=size, mode="bilinear", align_corners=False)
