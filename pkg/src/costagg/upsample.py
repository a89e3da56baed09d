"""Training-free guided upsampling, shared channel reduction and argmax prediction."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ContractError, ShapeError

IGNORE_LABEL = 255
ORDERS = ("reduce_after_up", "reduce_before_up")


@runtime_checkable
class GuidedUpsampler(Protocol):
    """``U(image, features)``: ``(B, 3, H, W)``, ``(B, C, h, w)`` -> ``(B, C, H, W)``.

    Implementations hold no trainable state. ``channelwise`` declares that output
    channel ``c`` depends only on input channel ``c``; callers may then batch
    several class slices through one call.
    """

    channelwise: bool

    def __call__(self, image: torch.Tensor, features: torch.Tensor) -> torch.Tensor: ...


def _source_coords(dst: int, src: int) -> torch.Tensor:
    # half-pixel centres, clamped to the valid source range
    u = (torch.arange(dst, dtype=torch.float64) + 0.5) * (src / dst) - 0.5
    return u.clamp(0, src - 1)


class JointBilateralUpsampler:
    """Reference guided upsampler.

    Each output pixel is a normalized mix of nearby low-resolution cells, weighted
    by a spatial kernel times a colour-similarity Gaussian between the pixel and
    the area-averaged image colour of the cell.

    ``spatial="bilinear"`` uses the tent kernel over the 2x2 nearest cells, which
    reduces to bilinear interpolation under constant guidance and to the identity
    at equal resolution. ``spatial="gaussian"`` uses a ``2*radius`` square of cells
    with a Gaussian of width ``sigma_spatial`` (in low-res cells).
    """

    channelwise = True

    def __init__(self, sigma_color: float = 0.1, spatial: str = "bilinear",
                 sigma_spatial: float = 1.0, radius: int = 2):
        if spatial not in ("bilinear", "gaussian"):
            raise ConfigError(f"unknown spatial kernel {spatial!r}")
        if sigma_color <= 0 or sigma_spatial <= 0 or radius < 1:
            raise ConfigError("sigma_color, sigma_spatial and radius must be positive")
        self.sigma_color = sigma_color
        self.spatial = spatial
        self.sigma_spatial = sigma_spatial
        self.radius = radius
        self._geometry: dict[tuple[int, int, int, int], tuple[torch.Tensor, torch.Tensor]] = {}

    def _axis(self, dst: int, src: int):
        """Neighbour indices (dst, K) and log spatial weights (dst, K) along one axis."""
        u = _source_coords(dst, src)
        base = torch.floor(u)
        if self.spatial == "bilinear":
            offsets = torch.tensor([0.0, 1.0])
        else:
            offsets = torch.arange(-self.radius + 1, self.radius + 1, dtype=torch.float64)
        cells = base[:, None] + offsets[None, :]
        d = cells - u[:, None]
        if self.spatial == "bilinear":
            w = (1 - d.abs()).clamp(min=0)
        else:
            w = torch.exp(-0.5 * (d / self.sigma_spatial) ** 2)
        inside = (cells >= 0) & (cells <= src - 1)
        w = torch.where(inside, w, torch.zeros_like(w))
        logw = torch.where(w > 0, torch.log(w.clamp(min=1e-300)), torch.full_like(w, -math.inf))
        return cells.clamp(0, src - 1).long(), logw

    def geometry(self, H: int, W: int, h: int, w: int):
        key = (H, W, h, w)
        if key not in self._geometry:
            iy, ly = self._axis(H, h)
            ix, lx = self._axis(W, w)
            Ky, Kx = iy.shape[1], ix.shape[1]
            idx = (iy[:, None, :, None] * w + ix[None, :, None, :]).reshape(H, W, Ky * Kx)
            logw = (ly[:, None, :, None] + lx[None, :, None, :]).reshape(H, W, Ky * Kx)
            self._geometry[key] = (idx, logw)
        return self._geometry[key]

    @torch.no_grad()
    def weights(self, image: torch.Tensor, h: int, w: int):
        """Neighbour indices (H, W, K) and normalized weights (B, H, W, K)."""
        B, _, H, W = image.shape
        idx, logw = self.geometry(H, W, h, w)
        guide = F.adaptive_avg_pool2d(image.double(), (h, w)).flatten(2)      # B, 3, h*w
        cell_rgb = guide[:, :, idx]                                           # B, 3, H, W, K
        diff = (cell_rgb - image.double()[..., None]).pow(2).sum(dim=1)       # B, H, W, K
        logits = logw[None] - diff / (2 * self.sigma_color ** 2)
        return idx, torch.softmax(logits, dim=-1)

    def __call__(self, image: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        B, C, h, w = features.shape
        H, W = image.shape[-2:]
        if image.shape[0] != B:
            raise ShapeError("image and feature batch sizes differ")
        if H < h or W < w:
            raise ShapeError(f"cannot upsample {h}x{w} features to smaller image {H}x{W}")
        idx, wts = self.weights(image, h, w)
        wts = wts.to(features.dtype)
        flat = features.flatten(2)
        out = features.new_zeros(B, C, H, W)
        for k in range(idx.shape[-1]):
            out = out + flat[:, :, idx[..., k].reshape(-1)].view(B, C, H, W) * wts[:, None, :, :, k]
        return out


class ChannelReducer(nn.Module):
    """1x1 convolution stack mapping ``d_agg`` channels to one score channel.

    ``hidden=0`` gives a single linear 1x1 convolution.
    """

    def __init__(self, d_agg: int, hidden: int = 0):
        super().__init__()
        if hidden:
            self.net = nn.Sequential(nn.Conv2d(d_agg, hidden, 1), nn.GELU(), nn.Conv2d(hidden, 1, 1))
        else:
            self.net = nn.Conv2d(d_agg, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) -> (N, H, W)"""
        return self.net(x)[:, 0]


def reduce_channels(feature_map: torch.Tensor, reducer: ChannelReducer) -> torch.Tensor:
    """Apply the shared reducer to ``(..., C, H, W)`` maps, returning ``(..., H, W)``."""
    lead = feature_map.shape[:-3]
    C, H, W = feature_map.shape[-3:]
    out = reducer(feature_map.reshape(-1, C, H, W))
    return out.view(*lead, H, W)


def _checked_upsample(up: GuidedUpsampler, image: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    out = up(image, feats)
    expected = (feats.shape[0], feats.shape[1], image.shape[-2], image.shape[-1])
    if tuple(out.shape) != expected:
        raise ContractError(f"upsampler returned shape {tuple(out.shape)}, expected {expected}")
    return out


def upsample_classwise(image: torch.Tensor, vol: torch.Tensor, up: GuidedUpsampler) -> torch.Tensor:
    """Upsample every class slice of a ``(B, M, h, w, C)`` volume to ``(B, M, C, H, W)``."""
    B, M, h, w, C = vol.shape
    H, W = image.shape[-2:]
    feats = vol.permute(0, 1, 4, 2, 3)                       # B, M, C, h, w
    if getattr(up, "channelwise", False):
        out = _checked_upsample(up, image, feats.reshape(B, M * C, h, w))
        return out.view(B, M, C, H, W)
    return torch.stack([_checked_upsample(up, image, feats[:, i]) for i in range(M)], dim=1)


def score_maps(image: torch.Tensor, vol: torch.Tensor, up: GuidedUpsampler, reducer: ChannelReducer,
               order: str = "reduce_after_up") -> torch.Tensor:
    """Per-class full-resolution scores ``(B, M, H, W)``."""
    if order == "reduce_after_up":
        return reduce_channels(upsample_classwise(image, vol, up), reducer)
    if order == "reduce_before_up":
        low = reduce_channels(vol.permute(0, 1, 4, 2, 3), reducer)         # B, M, h, w
        return upsample_classwise(image, low[..., None], up)[:, :, 0]
    raise ConfigError(f"unknown reduction order {order!r}; expected one of {ORDERS}")


def argmax_labels(scores: torch.Tensor) -> torch.Tensor:
    """Argmax over the class axis (dim -3); ties go to the lowest class index."""
    # torch.argmax returns the first maximal index
    return scores.argmax(dim=-3)


def predict(image: torch.Tensor, vol: torch.Tensor, up: GuidedUpsampler, reducer: ChannelReducer,
            order: str = "reduce_after_up") -> torch.Tensor:
    return argmax_labels(score_maps(image, vol, up, reducer, order))


def default_palette(n: int) -> np.ndarray:
    """Deterministic, well-spread RGB colours for ``n`` classes."""
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(n, 1), 3), dtype=np.uint8)
    return pal[:n]


def save_mask(labels, path: str | Path, palette: np.ndarray | None = None) -> Path:
    """Write an 8-bit single-channel index mask; optionally a palette sidecar and colour render."""
    arr = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ShapeError("mask labels must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8)).save(path)
    if palette is not None:
        lines = [f"{i}\t{r}\t{g}\t{b}" for i, (r, g, b) in enumerate(palette)]
        path.with_suffix(".palette.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        color = np.zeros(arr.shape + (3,), dtype=np.uint8)
        for i, rgb in enumerate(palette):
            color[arr == i] = rgb
        Image.fromarray(color).save(path.with_name(path.stem + "_color.png"))
    return path


def load_mask(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "P", "I", "I;16"):
        raise ShapeError(f"{path}: expected a single-channel index mask, got mode {img.mode}")
    return np.asarray(img, dtype=np.int64)
