"""Supervised training of the aggregator and head on class-filtered data."""
from __future__ import annotations

import logging
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbone import FreezePolicy
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .model import SegmentationModel
from .upsample import IGNORE_LABEL, load_mask
from .vocab import ClassVocabulary

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


@dataclass
class TrainConfig:
    batch_size: int = 4
    iterations: int = 45_000
    train_resolution: int = 224
    lr_head: float = 2e-4
    lr_backbone: float = 2e-6
    weight_decay: float = 1e-4
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    seed: int = 0
    checkpoint_every: int = 0
    patch_size: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr_head < 0 or self.lr_backbone < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.patch_size and self.train_resolution % self.patch_size:
            raise ConfigError(f"train_resolution {self.train_resolution} is not divisible by "
                              f"patch size {self.patch_size}")


@dataclass
class TrainingSample:
    image: torch.Tensor   # (3, H, W) in [0, 1]
    mask: torch.Tensor    # (H, W) int64, IGNORE_LABEL for unlabeled


def filter_subset(mask, keep: ClassVocabulary | Sequence[str], raw_vocab: ClassVocabulary | Sequence[str],
                  ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Relabel kept raw classes to contiguous ids in ``keep`` order; everything else is ignored."""
    keep = list(keep)
    raw = list(raw_vocab)
    if not keep:
        raise ConfigError("subset vocabulary is empty")
    missing = [k for k in keep if k not in raw]
    if missing:
        raise ConfigError(f"subset classes not in raw vocabulary: {missing}")
    m = np.asarray(mask, dtype=np.int64)
    bad = (m != ignore_label) & ((m < 0) | (m >= len(raw)))
    if bad.any():
        raise ValidationError(f"mask contains labels outside the raw vocabulary: {sorted(set(m[bad].tolist()))[:10]}")
    lut = np.full(max(len(raw), ignore_label + 1), ignore_label, dtype=np.int64)
    for new, name in enumerate(keep):
        lut[raw.index(name)] = new
    out = np.full_like(m, ignore_label)
    valid = m != ignore_label
    out[valid] = lut[m[valid]]
    return out


def sample_random_subset(raw_vocab: ClassVocabulary | Sequence[str], size: int, seed: int) -> ClassVocabulary:
    """Uniform sample without replacement; names keep their raw-vocabulary order."""
    raw = list(raw_vocab)
    if not 1 <= size <= len(raw):
        raise ValidationError(f"subset size {size} outside [1, {len(raw)}]")
    idx = sorted(random.Random(seed).sample(range(len(raw)), size))
    return ClassVocabulary(tuple(raw[i] for i in idx))


def compute_loss(scores: torch.Tensor, mask: torch.Tensor, ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
    """Mean per-pixel softmax cross-entropy over non-ignored pixels.

    ``scores`` is ``(B, M, H, W)`` (or unbatched ``(M, H, W)``). When every pixel
    is ignored the loss is defined as 0 and a warning is issued.
    """
    if scores.dim() == 3:
        scores, mask = scores[None], mask[None]
    if scores.shape[0] != mask.shape[0] or scores.shape[2:] != mask.shape[1:]:
        raise ValidationError(f"scores {tuple(scores.shape)} and mask {tuple(mask.shape)} do not match")
    mask = mask.long()
    if not bool((mask != ignore_label).any()):
        warnings.warn("every pixel is ignored; loss defined as 0", RuntimeWarning, stacklevel=2)
        return scores.sum() * 0.0
    return F.cross_entropy(scores, mask, ignore_index=ignore_label)


# ----------------------------------------------------------------------------- data

SYNTHETIC_CLASSES = ("grass", "road", "building")
_SYNTH_COLORS = np.array([[0.25, 0.60, 0.20], [0.45, 0.45, 0.48], [0.75, 0.30, 0.20]])


def synthetic_sample(rng: np.random.Generator, size: int = 64, noise: float = 0.04) -> TrainingSample:
    """Grass background with road strips and building blocks, each class its own colour."""
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(rng.integers(1, 3)):
        w = rng.integers(size // 10, size // 5)
        if rng.random() < 0.5:
            r = rng.integers(0, size - w)
            mask[r:r + w, :] = 1
        else:
            c = rng.integers(0, size - w)
            mask[:, c:c + w] = 1
    for _ in range(rng.integers(1, 4)):
        h, w = rng.integers(size // 8, size // 3, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        mask[r:r + h, c:c + w] = 2
    colors = _SYNTH_COLORS + rng.normal(0, 0.03, size=_SYNTH_COLORS.shape)
    img = colors[mask] + rng.normal(0, noise, size=(size, size, 3))
    img = np.clip(img, 0, 1).astype(np.float32)
    return TrainingSample(torch.from_numpy(img).permute(2, 0, 1).contiguous(), torch.from_numpy(mask))


def synthetic_dataset(n: int = 16, size: int = 64, seed: int = 0) -> list[TrainingSample]:
    rng = np.random.default_rng(seed)
    return [synthetic_sample(rng, size) for _ in range(n)]


def load_image(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def list_pairs(root: str | Path) -> tuple[list[tuple[str, Path, Path]], list[str]]:
    """Pair ``images/<name>.*`` with ``masks/<name>.*``; returns (pairs, names missing a mask)."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise ValidationError(f"{root}: missing images/ directory")
    masks = {p.stem: p for p in sorted(mask_dir.glob("*")) if p.suffix.lower() in IMAGE_SUFFIXES} \
        if mask_dir.is_dir() else {}
    pairs, missing = [], []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem in masks:
            pairs.append((p.stem, p, masks[p.stem]))
        else:
            missing.append(p.stem)
    return pairs, missing


def directory_dataset(root: str | Path, keep: Sequence[str] | None = None,
                      raw_vocab: Sequence[str] | None = None) -> list[TrainingSample]:
    """Load a dataset directory, optionally filtering masks to a kept class subset."""
    pairs, missing = list_pairs(root)
    if missing:
        log.warning("%d images without masks skipped", len(missing))
    if not pairs:
        raise ValidationError(f"{root}: no image/mask pairs found")
    out = []
    for _, ip, mp in pairs:
        mask = load_mask(mp)
        if keep is not None:
            mask = filter_subset(mask, keep, raw_vocab)
        out.append(TrainingSample(load_image(ip), torch.from_numpy(mask)))
    return out


def batches(samples: Sequence[TrainingSample], batch_size: int, seed: int) -> Iterator[list[TrainingSample]]:
    """Endless seeded stream of batches, reshuffling each epoch."""
    gen = torch.Generator().manual_seed(seed)
    while True:
        order = torch.randperm(len(samples), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            chunk = order[i:i + batch_size]
            if len(chunk) < batch_size and len(samples) >= batch_size:
                chunk = chunk + order[:batch_size - len(chunk)]
            yield [samples[j] for j in chunk]


def collate(batch: Sequence[TrainingSample], resolution: int | None) -> tuple[torch.Tensor, torch.Tensor]:
    images, masks = [], []
    for s in batch:
        img, m = s.image, s.mask
        if resolution is not None and tuple(img.shape[-2:]) != (resolution, resolution):
            img = F.interpolate(img[None], size=(resolution, resolution), mode="bilinear",
                                align_corners=False)[0]
            m = F.interpolate(m[None, None].float(), size=(resolution, resolution), mode="nearest")[0, 0].long()
        images.append(img)
        masks.append(m)
    return torch.stack(images), torch.stack(masks)


# ----------------------------------------------------------------------------- optimisation

@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    class_names: tuple[str, ...]
    step: int = 0
    losses: list[float] = field(default_factory=list)


def make_state(model: SegmentationModel, cfg: TrainConfig, class_names: Sequence[str]) -> TrainState:
    """Apply the freeze policy and build a two-tier AdamW optimizer."""
    model.set_freeze_policy(cfg.freeze)
    groups = [{"params": list(model.head_parameters()), "lr": cfg.lr_head}]
    backbone = [p for enc in (model.vision, model.text) for p in enc.trainable_parameters() if p.requires_grad]
    if backbone:
        groups.append({"params": backbone, "lr": cfg.lr_backbone})
    opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    return TrainState(model, opt, cfg, tuple(class_names))


def train_step(state: TrainState, batch: Sequence[TrainingSample]) -> float:
    """One optimizer step on ``batch``; returns the loss before the update."""
    images, masks = collate(batch, state.cfg.train_resolution)
    model = state.model
    model.train()
    scores = model(images, state.class_names)
    loss = compute_loss(scores, masks)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.losses.append(value)
    return value


def train(state: TrainState, samples: Sequence[TrainingSample], iterations: int | None = None,
          log_file=None, on_checkpoint=None) -> list[float]:
    """Run ``iterations`` steps, writing ``step<TAB>loss`` lines to ``log_file`` if given."""
    iterations = state.cfg.iterations if iterations is None else iterations
    stream = batches(samples, state.cfg.batch_size, state.cfg.seed)
    out = []
    for _ in range(iterations):
        loss = train_step(state, next(stream))
        out.append(loss)
        if log_file is not None:
            log_file.write(f"{state.step}\t{loss:.8f}\n")
            if state.step % 50 == 0:
                log_file.flush()
        every = state.cfg.checkpoint_every
        if on_checkpoint is not None and every and state.step % every == 0:
            on_checkpoint(state)
    if log_file is not None:
        log_file.flush()
    return out


def pixel_accuracy(model: SegmentationModel, sample: TrainingSample, class_names: Sequence[str]) -> float:
    model.eval()
    pred = model.segment(sample.image[None], class_names)[0]
    valid = sample.mask != IGNORE_LABEL
    return float((pred[valid] == sample.mask[valid]).float().mean())
