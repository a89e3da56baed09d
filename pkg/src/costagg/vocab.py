"""Class vocabularies, prompt templates, name remapping and prompt ensembling."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .errors import DegenerateVectorError, ValidationError

PLACEHOLDER = "{}"
BACKGROUND_KEY = "__background__"

# norms below this are treated as zero
_EPS = 1e-12


def _data_path(name: str) -> Path:
    return Path(str(resources.files("costagg") / "data" / name))


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    background_included: bool = False
    remap_source: str | None = None

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValidationError("vocabulary must contain at least one class")
        for n in names:
            if not isinstance(n, str) or not n.strip():
                raise ValidationError(f"invalid class name {n!r}")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate class names: {dupes}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple[str, ...]

    def __post_init__(self):
        templates = tuple(self.templates)
        object.__setattr__(self, "templates", templates)
        if not templates:
            raise ValidationError("template set is empty")
        for t in templates:
            n = t.count(PLACEHOLDER)
            if n != 1:
                raise ValidationError(
                    f"template {t!r} must contain exactly one {PLACEHOLDER!r} placeholder, found {n}"
                )

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)


def default_templates() -> PromptTemplateSet:
    """The ten wrapper sentences used for prompt ensembling."""
    return load_templates(_data_path("templates.txt"))


def load_templates(path: str | Path) -> PromptTemplateSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return PromptTemplateSet(tuple(l.strip() for l in lines if l.strip() and not l.startswith("#")))


def load_vocabulary(path: str | Path, background_included: bool = False,
                    remap_source: str | None = None) -> ClassVocabulary:
    """Read one class name per line; line order is the class index."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = [l.strip() for l in lines if l.strip()]
    if remap_source is not None:
        names = remap_class_names(remap_source, names)
    return ClassVocabulary(tuple(names), background_included, remap_source)


def save_vocabulary(vocab: ClassVocabulary | Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(n + "\n" for n in vocab), encoding="utf-8")


def render_prompts(class_name: str, templates: PromptTemplateSet | Sequence[str]) -> list[str]:
    if not isinstance(templates, PromptTemplateSet):
        templates = PromptTemplateSet(tuple(templates))
    if not class_name or not class_name.strip():
        raise ValidationError("class name is empty")
    return [t.replace(PLACEHOLDER, class_name) for t in templates]


def ensemble_embed(class_name: str, templates: PromptTemplateSet | Sequence[str], encoder) -> torch.Tensor:
    """Average the encoder outputs over all rendered prompts, then L2-normalize once.

    ``encoder`` must provide ``encode(prompts) -> (P, 2D) tensor``. Gradients flow
    through the result so a trainable text encoder can be fine-tuned.
    """
    prompts = render_prompts(class_name, templates)
    emb = encoder.encode(prompts).mean(dim=0)
    norm = emb.norm()
    if float(norm.detach()) <= _EPS:
        raise DegenerateVectorError(f"mean prompt embedding for {class_name!r} has zero magnitude")
    return emb / norm


def embed_vocabulary(names: Iterable[str], templates, encoder) -> torch.Tensor:
    """Stack ensembled embeddings in vocabulary order, shape (M, 2D)."""
    return torch.stack([ensemble_embed(n, templates, encoder) for n in names])


class RemapRegistry:
    """Per-dataset class-name substitutions plus background-index records."""

    def __init__(self, table: dict[str, dict[str, str]] | None = None,
                 background: dict[str, int] | None = None):
        self.table = table or {}
        self.background = background or {}

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RemapRegistry":
        path = _data_path("remap.tsv") if path is None else Path(path)
        table: dict[str, dict[str, str]] = {}
        background: dict[str, int] = {}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            dataset_id, old, new = (p.strip() for p in parts)
            if old == BACKGROUND_KEY:
                try:
                    background[dataset_id] = int(new)
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: background index {new!r} is not an integer") from None
            else:
                table.setdefault(dataset_id, {})[old] = new
        return cls(table, background)

    def datasets(self) -> set[str]:
        return {"identity", *self.table, *self.background}

    def remap(self, dataset_id: str, raw_names: Sequence[str]) -> list[str]:
        if dataset_id == "identity":
            return list(raw_names)
        if dataset_id not in self.datasets():
            raise ValidationError(f"unknown dataset id {dataset_id!r}; known: {sorted(self.datasets())}")
        subs = self.table.get(dataset_id, {})
        return [subs.get(n, n) for n in raw_names]

    def background_index(self, dataset_id: str) -> int | None:
        return self.background.get(dataset_id)


_default_registry: RemapRegistry | None = None


def default_registry() -> RemapRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = RemapRegistry.load()
    return _default_registry


def remap_class_names(dataset_id: str, raw_names: Sequence[str],
                      registry: RemapRegistry | None = None) -> list[str]:
    return (registry or default_registry()).remap(dataset_id, raw_names)


def coco_stuff_vocabulary() -> ClassVocabulary:
    """All 171 COCO-Stuff classes with the short names the curated subset uses."""
    return load_vocabulary(_data_path("coco_stuff_171.txt"), remap_source="cocostuff")


def curated_subset() -> ClassVocabulary:
    """41 COCO-Stuff classes that plausibly appear in overhead imagery."""
    return load_vocabulary(_data_path("coco_stuff_rs41.txt"))
