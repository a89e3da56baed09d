"""Cost aggregation network.

A shared-weight convolutional projection lifts every class cost map to ``d_agg``
channels. Each aggregation block then runs a Swin block pair on every class slice
independently (spatial aggregation) followed by a transformer block over the class
axis at every pixel (class attention). Both stages are residual.

Layouts: cost volume ``(B, M, h, w)``; projected volume ``(B, M, h, w, D)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

ATTENTION_VARIANTS = ("full", "linear")

# additive logit for masked keys; large enough that exp() underflows to exactly 0
_MASKED = -1e9


@dataclass
class AggregatorConfig:
    d_agg: int = 128
    num_blocks: int = 6
    window_size: int = 7
    num_heads: int = 4
    class_heads: int = 4
    mlp_ratio: float = 4.0
    attention_variant: str = "full"
    shift_second: bool = True

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.d_agg < 1 or self.window_size < 1:
            raise ConfigError("d_agg and window_size must be positive")
        for name in ("num_heads", "class_heads"):
            heads = getattr(self, name)
            if heads < 1 or self.d_agg % heads:
                raise ConfigError(f"{name}={heads} must be >= 1 and divide d_agg={self.d_agg}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(f"attention_variant must be one of {ATTENTION_VARIANTS}, "
                              f"got {self.attention_variant!r}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def relative_position_index(win_h: int, win_w: int, table_side: int) -> torch.Tensor:
    """Index into a ``(2*table_side - 1)**2`` bias table for every query/key pair."""
    ys, xs = torch.meshgrid(torch.arange(win_h), torch.arange(win_w), indexing="ij")
    coords = torch.stack([ys.flatten(), xs.flatten()])          # 2, N
    rel = coords[:, :, None] - coords[:, None, :]                # 2, N, N
    rel = rel + (table_side - 1)
    return rel[0] * (2 * table_side - 1) + rel[1]


def window_partition(x: torch.Tensor, win_h: int, win_w: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, win_h * win_w, C)"""
    B, H, W, C = x.shape
    x = x.view(B, H // win_h, win_h, W // win_w, win_w, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win_h * win_w, C)


def window_reverse(windows: torch.Tensor, win_h: int, win_w: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // win_h, W // win_w, win_h, win_w, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self._index_cache: dict[tuple[int, int], torch.Tensor] = {}

    def position_bias(self, win_h: int, win_w: int) -> torch.Tensor:
        key = (win_h, win_w)
        if key not in self._index_cache:
            self._index_cache[key] = relative_position_index(win_h, win_w, self.window_size)
        idx = self._index_cache[key]
        n = win_h * win_w
        bias = self.relative_position_bias_table[idx.reshape(-1)].view(n, n, self.num_heads)
        return bias.permute(2, 0, 1)

    def forward(self, x: torch.Tensor, win_h: int, win_w: int, mask: torch.Tensor | None = None):
        """
        Args:
            x: (B * nW, N, C) window tokens.
            mask: (nW, N, N) additive mask, or None.
        """
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias(win_h, win_w).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention + MLP, both residual.

    Grids that are not a multiple of the window are zero-padded; padded tokens
    are masked out as keys and cropped away afterwards. When the grid is no larger
    than the window along an axis, the window shrinks to the grid and no shift
    is applied along that axis.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._mask_cache: dict[tuple, torch.Tensor | None] = {}

    def layout(self, H: int, W: int):
        """Window size, shift and padded extent along each axis."""
        win_h, win_w = min(self.window_size, H), min(self.window_size, W)
        sh = win_h // 2 if self.shift and H > self.window_size else 0
        sw = win_w // 2 if self.shift and W > self.window_size else 0
        Hp = math.ceil(H / win_h) * win_h
        Wp = math.ceil(W / win_w) * win_w
        return win_h, win_w, sh, sw, Hp, Wp

    def attention_mask(self, H: int, W: int, device=None) -> torch.Tensor | None:
        win_h, win_w, sh, sw, Hp, Wp = self.layout(H, W)
        key = (H, W, device)
        if key in self._mask_cache:
            return self._mask_cache[key]
        if not (sh or sw or Hp != H or Wp != W):
            self._mask_cache[key] = None
            return None
        valid = torch.zeros(Hp, Wp)
        valid[:H, :W] = 1
        region = torch.zeros(Hp, Wp)
        cnt = 0
        h_slices = ((0, Hp - win_h), (Hp - win_h, Hp - sh), (Hp - sh, Hp)) if sh else ((0, Hp),)
        w_slices = ((0, Wp - win_w), (Wp - win_w, Wp - sw), (Wp - sw, Wp)) if sw else ((0, Wp),)
        for h0, h1 in h_slices:
            for w0, w1 in w_slices:
                region[h0:h1, w0:w1] = cnt
                cnt += 1
        # region ids are assigned in the rolled frame; validity lives in the original frame
        valid = torch.roll(valid, shifts=(-sh, -sw), dims=(0, 1))
        region_w = window_partition(region[None, :, :, None], win_h, win_w).squeeze(-1)
        valid_w = window_partition(valid[None, :, :, None], win_h, win_w).squeeze(-1)
        same = region_w[:, :, None] == region_w[:, None, :]
        keep = same & (valid_w[:, None, :] > 0)
        mask = torch.zeros(keep.shape).masked_fill(~keep, _MASKED)
        mask = mask.to(device) if device is not None else mask
        self._mask_cache[key] = mask
        return mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, C)"""
        B, H, W, C = x.shape
        win_h, win_w, sh, sw, Hp, Wp = self.layout(H, W)
        y = self.norm1(x)
        if Hp != H or Wp != W:
            y = F.pad(y, (0, 0, 0, Wp - W, 0, Hp - H))
        if sh or sw:
            y = torch.roll(y, shifts=(-sh, -sw), dims=(1, 2))
        mask = self.attention_mask(H, W, x.device)
        if mask is not None:
            mask = mask.to(x.dtype)
        windows = self.attn(window_partition(y, win_h, win_w), win_h, win_w, mask)
        y = window_reverse(windows, win_h, win_w, Hp, Wp)
        if sh or sw:
            y = torch.roll(y, shifts=(sh, sw), dims=(1, 2))
        x = x + y[:, :H, :W, :]
        return x + self.mlp(self.norm2(x))


class ClasswiseProjection(nn.Module):
    """Two 3x3 convolutions lifting each 1-channel cost map to ``d_agg`` channels.

    The same weights are applied to every class slice.
    """

    def __init__(self, d_agg: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, d_agg, 3, padding=1, padding_mode="replicate")
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(d_agg, d_agg, 3, padding=1, padding_mode="replicate")

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        B, M, h, w = vol.shape
        x = self.conv2(self.act(self.conv1(vol.reshape(B * M, 1, h, w))))
        return x.view(B, M, -1, h, w).permute(0, 1, 3, 4, 2)


class ClassAttention(nn.Module):
    """Self-attention over the class tokens of one pixel; no positional encoding."""

    def __init__(self, dim: int, num_heads: int, variant: str = "full"):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.variant = variant
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (L, M, C) with L independent pixels."""
        L, M, C = x.shape
        qkv = self.qkv(x).reshape(L, M, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)                                       # L, heads, M, hd
        if self.variant == "full":
            attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
            out = attn @ v
        else:
            q, k = F.elu(q) + 1, F.elu(k) + 1
            kv = k.transpose(-2, -1) @ v                              # L, heads, hd, hd
            norm = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)  # L, heads, M, 1
            out = (q @ kv) / norm
        return self.proj(out.transpose(1, 2).reshape(L, M, C))


class ClassAttentionBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, variant: str = "full", mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ClassAttention(dim, num_heads, variant)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, M, h, w, C); every pixel is processed on its own."""
        B, M, h, w, C = x.shape
        t = x.permute(0, 2, 3, 1, 4).reshape(B * h * w, M, C)
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.view(B, h, w, M, C).permute(0, 3, 1, 2, 4)


class SwinPair(nn.Module):
    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.block1 = SwinBlock(cfg.d_agg, cfg.num_heads, cfg.window_size, False, cfg.mlp_ratio)
        self.block2 = SwinBlock(cfg.d_agg, cfg.num_heads, cfg.window_size, cfg.shift_second, cfg.mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, M, h, w, C); class slices never interact."""
        B, M, h, w, C = x.shape
        y = self.block2(self.block1(x.reshape(B * M, h, w, C)))
        return y.view(B, M, h, w, C)


class AggregationBlock(nn.Module):
    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.spatial = SwinPair(cfg)
        self.classwise = ClassAttentionBlock(cfg.d_agg, cfg.class_heads, cfg.attention_variant, cfg.mlp_ratio)

    def forward(self, x):
        return self.classwise(self.spatial(x))


class CostAggregator(nn.Module):
    def __init__(self, cfg: AggregatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or AggregatorConfig()
        self.projection = ClasswiseProjection(self.cfg.d_agg)
        self.blocks = nn.ModuleList(AggregationBlock(self.cfg) for _ in range(self.cfg.num_blocks))
        # element count of the last projected volume, for memory accounting
        self.projected_numel = 0

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        if vol.dim() != 4:
            raise ShapeError(f"expected a (B, M, h, w) cost volume, got {tuple(vol.shape)}")
        x = self.projection(vol)
        self.projected_numel = x.numel()
        for blk in self.blocks:
            x = blk(x)
        return x


def project_classwise(vol: torch.Tensor, agg: CostAggregator) -> torch.Tensor:
    return agg.projection(vol)


def spatial_aggregate(x: torch.Tensor, block: AggregationBlock | SwinPair) -> torch.Tensor:
    pair = block.spatial if isinstance(block, AggregationBlock) else block
    return pair(x)


def class_attend(x: torch.Tensor, block: AggregationBlock | ClassAttentionBlock) -> torch.Tensor:
    cab = block.classwise if isinstance(block, AggregationBlock) else block
    return cab(x)


def aggregate(vol: torch.Tensor, agg: CostAggregator | AggregatorConfig) -> torch.Tensor:
    """Projection followed by every aggregation block.

    Passing a config builds a freshly initialized aggregator (seeded by the
    caller's torch RNG state).
    """
    if isinstance(agg, AggregatorConfig):
        agg = CostAggregator(agg).to(vol.dtype)
    return agg(vol)


def zero_output_projections(module: nn.Module) -> None:
    """Zero the last layer of every attention and MLP branch, turning blocks into identities."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (WindowAttention, ClassAttention)):
                m.proj.weight.zero_()
                m.proj.bias.zero_()
            elif isinstance(m, Mlp):
                m.fc2.weight.zero_()
                m.fc2.bias.zero_()
