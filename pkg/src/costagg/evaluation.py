"""Confusion-matrix accumulation and mIoU reporting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import UndefinedMetricError, ValidationError
from .inference import SlidingWindowConfig, predict_full
from .training import list_pairs, load_image
from .upsample import IGNORE_LABEL, load_mask
from .vocab import ClassVocabulary, remap_class_names

log = logging.getLogger(__name__)

MODES = ("with_background", "without_background")


class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        if num_classes < 1:
            raise ValidationError("confusion matrix needs at least one class")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored_pixels = 0

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = _as_array(pred)
        gt = _as_array(gt)
        if pred.shape != gt.shape:
            raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        n = self.num_classes
        keep = gt != self.ignore_label
        g, p = gt[keep], pred[keep]
        if g.size and (g.min() < 0 or g.max() >= n):
            raise ValidationError(f"ground-truth labels outside [0, {n}) and not ignore")
        if p.size and (p.min() < 0 or p.max() >= n):
            raise ValidationError(f"predicted labels outside [0, {n})")
        self.counts += np.bincount(n * g + p, minlength=n * n).reshape(n, n)
        self.ignored_pixels += int((~keep).sum())
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_label)
        out.counts = self.counts + other.counts
        out.ignored_pixels = self.ignored_pixels + other.ignored_pixels
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored_pixels

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.ignore_label).merge(self)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.int64)


def accumulate(pred, gt, cm: ConfusionMatrix) -> ConfusionMatrix:
    return cm.add(pred, gt)


@dataclass
class MetricsReport:
    per_class_iou: list[float | None]
    miou: float
    mode: str
    class_names: list[str] = field(default_factory=list)
    skipped_images: list[str] = field(default_factory=list)

    def as_percent(self) -> dict[str, str]:
        out = {}
        for name, iou in zip(self.class_names, self.per_class_iou):
            out[name] = "nan" if iou is None else f"{100 * iou:.1f}"
        out["miou"] = f"{100 * self.miou:.1f}"
        return out


def miou(cm: ConfusionMatrix, mode: str = "with_background", background_index: int | None = None,
         class_names: Sequence[str] | None = None) -> MetricsReport:
    """Per-class IoU and their mean over classes with a non-zero union.

    In ``without_background`` mode the background row and column are removed first.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.num_classes)]
    counts = cm.counts
    if mode == "without_background" and background_index is not None:
        if not 0 <= background_index < cm.num_classes:
            raise ValidationError(f"background index {background_index} out of range")
        keep = [i for i in range(cm.num_classes) if i != background_index]
        counts = counts[np.ix_(keep, keep)]
        names = [names[i] for i in keep]
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class: list[float | None] = [None if u == 0 else float(i / u) for i, u in zip(inter, union)]
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise UndefinedMetricError("every class has an empty union; mIoU is undefined")
    return MetricsReport(per_class, math.fsum(defined) / len(defined), mode, names)


class Segmenter(Protocol):
    def segment(self, image: torch.Tensor, name: str) -> np.ndarray: ...


class ModelSegmenter:
    """Sliding-window predictions from a model, with class embeddings computed once."""

    def __init__(self, model, class_names: Sequence[str], window_cfg: SlidingWindowConfig):
        self.model = model
        self.window_cfg = window_cfg
        with torch.no_grad():
            self.embeddings = model.embed_classes(class_names)

    def segment(self, image: torch.Tensor, name: str) -> np.ndarray:
        return predict_full(image, self.model, cfg=self.window_cfg, embeddings=self.embeddings).numpy()


class OracleSegmenter:
    """Returns the ground truth itself (ignored pixels labelled 0); a harness sanity check."""

    def __init__(self, dataset_dir: str | Path):
        self.pairs = {name: mp for name, _, mp in list_pairs(dataset_dir)[0]}

    def segment(self, image: torch.Tensor, name: str) -> np.ndarray:
        gt = load_mask(self.pairs[name])
        return np.where(gt == IGNORE_LABEL, 0, gt)


def evaluate_confusion(dataset_dir: str | Path, num_classes: int, segmenter: Segmenter
                       ) -> tuple[ConfusionMatrix, list[str]]:
    pairs, missing = list_pairs(dataset_dir)
    for name in missing:
        log.warning("no mask for image %s; skipped", name)
    if not pairs:
        raise ValidationError(f"{dataset_dir}: no image/mask pairs to evaluate")
    cm = ConfusionMatrix(num_classes)
    for name, ip, mp in pairs:
        gt = load_mask(mp)
        pred = segmenter.segment(load_image(ip), name)
        cm.add(pred, gt)
    return cm, missing


def evaluate_directory(dataset_dir: str | Path, vocab: ClassVocabulary | Sequence[str], model,
                       window_cfg: SlidingWindowConfig = SlidingWindowConfig(),
                       modes: Sequence[str] = ("without_background",), dataset_id: str = "identity",
                       background_index: int | None = None,
                       background_prompt: str | None = None) -> dict[str, MetricsReport]:
    """Predict every image in ``dataset_dir`` and report mIoU for each requested mode.

    ``vocab`` holds the dataset's raw class names in mask-index order; they are
    remapped for ``dataset_id`` before prompting. ``model`` is a
    :class:`~costagg.model.SegmentationModel` or any object with a ``segment``
    method (see :class:`Segmenter`).
    """
    raw = list(vocab)
    names = remap_class_names(dataset_id, raw)
    if background_prompt is not None and background_index is not None:
        names[background_index] = background_prompt
    segmenter = model if hasattr(model, "segment") and not isinstance(model, torch.nn.Module) \
        else ModelSegmenter(model, names, window_cfg)
    cm, missing = evaluate_confusion(dataset_dir, len(raw), segmenter)
    reports = {}
    for mode in modes:
        rep = miou(cm, mode, background_index, raw)
        rep.skipped_images = list(missing)
        reports[mode] = rep
    return reports


def format_table(report: MetricsReport) -> str:
    pct = report.as_percent()
    width = max(len(n) for n in pct)
    lines = [f"mode: {report.mode}", f"{'class'.ljust(width)}  IoU(%)", "-" * (width + 8)]
    for name, iou in zip(report.class_names, report.per_class_iou):
        lines.append(f"{name.ljust(width)}  {pct[name]:>6}")
    lines.append("-" * (width + 8))
    lines.append(f"{'mIoU'.ljust(width)}  {pct['miou']:>6}")
    if report.skipped_images:
        lines.append(f"skipped images (no mask): {len(report.skipped_images)}")
    return "\n".join(lines) + "\n"


def format_keyvalue(report: MetricsReport) -> str:
    pct = report.as_percent()
    lines = [f"{name}={pct[name]}" for name in report.class_names]
    lines.append(f"miou={pct['miou']}")
    lines.append(f"skipped={len(report.skipped_images)}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"report_{report.mode}"
    txt, kv = out / f"{stem}.txt", out / f"{stem}.kv"
    txt.write_text(format_table(report), encoding="utf-8")
    kv.write_text(format_keyvalue(report), encoding="utf-8")
    return txt, kv
