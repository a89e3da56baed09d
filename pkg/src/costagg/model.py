"""End-to-end segmentation model: encoders, cost volume, aggregator, upsampling head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .aggregator import AggregatorConfig, CostAggregator
from .backbone import (FreezePolicy, ToyTextEncoder, ToyVisionEncoder, apply_freeze_policy,
                       dense_descriptors)
from .cost_volume import build_cost_volume
from .errors import ConfigError
from .upsample import ORDERS, ChannelReducer, JointBilateralUpsampler, argmax_labels, score_maps
from .vocab import PromptTemplateSet, default_templates, embed_vocabulary


@dataclass
class ModelConfig:
    vision_dim: int = 32
    patch_size: int = 16
    text_token_dim: int = 32
    text_buckets: int = 4096
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    reducer_hidden: int | None = None
    reduce_order: str = "reduce_after_up"
    sigma_color: float = 0.1
    spatial_kernel: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.aggregator, dict):
            self.aggregator = AggregatorConfig(**self.aggregator)
        if self.reduce_order not in ORDERS:
            raise ConfigError(f"reduce_order must be one of {ORDERS}, got {self.reduce_order!r}")
        if self.vision_dim < 1 or self.patch_size < 1:
            raise ConfigError("vision_dim and patch_size must be positive")

    @property
    def hidden(self) -> int:
        return self.aggregator.d_agg // 2 if self.reducer_hidden is None else self.reducer_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig, templates: PromptTemplateSet | None = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.vision = ToyVisionEncoder(cfg.vision_dim, cfg.patch_size, seed=cfg.seed)
            self.text = ToyTextEncoder(2 * cfg.vision_dim, cfg.text_token_dim, cfg.text_buckets, seed=cfg.seed)
            self.aggregator = CostAggregator(cfg.aggregator)
            self.reducer = ChannelReducer(cfg.aggregator.d_agg, cfg.hidden)
        # frozen and parameter-free; deliberately not a submodule
        self.upsampler = JointBilateralUpsampler(cfg.sigma_color, cfg.spatial_kernel)
        self.templates = templates or default_templates()

    @property
    def patch_size(self) -> int:
        return self.vision.patch_size

    def set_freeze_policy(self, policy: FreezePolicy) -> None:
        apply_freeze_policy(self.vision, self.text, policy)

    def head_parameters(self):
        yield from self.aggregator.parameters()
        yield from self.reducer.parameters()

    def embed_classes(self, class_names: Sequence[str]) -> torch.Tensor:
        return embed_vocabulary(class_names, self.templates, self.text)

    def cost_volume(self, images: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
        feats = self.vision.encode_image(images)
        return build_cost_volume(dense_descriptors(feats), embeddings)

    def aggregated(self, images: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
        return self.aggregator(self.cost_volume(images, embeddings))

    def forward(self, images: torch.Tensor, class_names: Sequence[str] | None = None,
                embeddings: torch.Tensor | None = None) -> torch.Tensor:
        """Full-resolution class scores ``(B, M, H, W)``."""
        if embeddings is None:
            if class_names is None:
                raise ValueError("pass class_names or precomputed embeddings")
            embeddings = self.embed_classes(class_names)
        vol = self.aggregated(images, embeddings)
        return score_maps(images, vol, self.upsampler, self.reducer, self.cfg.reduce_order)

    @torch.no_grad()
    def segment(self, images: torch.Tensor, class_names: Sequence[str]) -> torch.Tensor:
        return argmax_labels(self(images, class_names))
