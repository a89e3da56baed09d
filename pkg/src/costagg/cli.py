"""Command-line entry point: train, predict, eval, export-costmaps, prepare-subset.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch

from .aggregator import AggregatorConfig
from .backbone import FREEZE_ROWS, FreezePolicy, check_divisible, resize_image
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost_volume import export_costmaps
from .errors import ConfigError, CostAggError, ValidationError
from .evaluation import OracleSegmenter, evaluate_directory, write_report
from .inference import SlidingWindowConfig, predict_full
from .model import ModelConfig, SegmentationModel
from .training import (SYNTHETIC_CLASSES, TrainConfig, directory_dataset, load_image, make_state,
                       sample_random_subset, synthetic_dataset, train)
from .upsample import argmax_labels, default_palette, save_mask
from .vocab import (ClassVocabulary, coco_stuff_vocabulary, curated_subset, default_registry,
                    load_templates, load_vocabulary, remap_class_names, save_vocabulary)

log = logging.getLogger("costagg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

PROFILES: dict[str, dict[str, dict[str, object]]] = {
    "desk": {
        "backbone": {"vision_dim": 32, "patch_size": 8, "text_token_dim": 32},
        "aggregator": {"d_agg": 16, "num_blocks": 6, "window_size": 4, "num_heads": 2,
                       "class_heads": 2, "mlp_ratio": 4.0, "attention_variant": "full",
                       "shift_second": True},
        "head": {"reducer_hidden": 8, "reduce_order": "reduce_after_up", "sigma_color": 0.1,
                 "spatial_kernel": "bilinear"},
        "train": {"batch_size": 4, "iterations": 200, "train_resolution": 64, "lr_head": 1e-3,
                  "lr_backbone": 1e-3, "weight_decay": 1e-4, "freeze": "vision", "checkpoint_every": 0},
        "data": {"dataset": "synthetic", "synthetic_images": 16, "synthetic_size": 64},
        "window": {"eval_size": 512, "window": 224, "stride": 112},
    },
    "full": {
        "backbone": {"vision_dim": 32, "patch_size": 16, "text_token_dim": 32},
        "aggregator": {"d_agg": 128, "num_blocks": 6, "window_size": 7, "num_heads": 4,
                       "class_heads": 4, "mlp_ratio": 4.0, "attention_variant": "full",
                       "shift_second": True},
        "head": {"reducer_hidden": 64, "reduce_order": "reduce_after_up", "sigma_color": 0.1,
                 "spatial_kernel": "bilinear"},
        "train": {"batch_size": 4, "iterations": 45000, "train_resolution": 224, "lr_head": 2e-4,
                  "lr_backbone": 2e-6, "weight_decay": 1e-4, "freeze": "vision", "checkpoint_every": 5000},
        "data": {"dataset": "synthetic", "synthetic_images": 16, "synthetic_size": 224},
        "window": {"eval_size": 512, "window": 224, "stride": 112},
    },
}

# keys accepted in a config file that are not profile defaults
_OPTIONAL_KEYS = {"data": {"vocab", "classes", "raw_vocab", "subset", "templates"}, "run": {"seed"}}


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    synthetic_images: int = 16
    synthetic_size: int = 64
    vocab: str | None = None
    classes: str | None = None
    raw_vocab: str | None = None
    subset: str | None = None
    templates: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    window: SlidingWindowConfig
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: Path = Path("out")


class _Source:
    """Merged profile + file values, remembering the file line each value came from."""

    def __init__(self, profile: str, path: str | None):
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        self.path = path
        self.values = {s: {k: str(v) for k, v in kv.items()} for s, kv in PROFILES[profile].items()}
        self.lines: dict[tuple[str, str | None], int] = {}
        if path is None:
            return
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        text = p.read_text(encoding="utf-8")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source=str(p))
        except configparser.Error as e:
            raise UsageError(f"{path}: {e}") from None
        section = None
        for no, line in enumerate(text.splitlines(), 1):
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = no
                continue
            m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
            if m and section:
                self.lines[(section, m.group(1).strip().lower())] = no
        for sec in parser.sections():
            allowed = set(self.values.get(sec, {})) | _OPTIONAL_KEYS.get(sec, set())
            if not allowed:
                raise UsageError(self.where(sec, None) + f"unknown section [{sec}]")
            for key, val in parser.items(sec):
                if key not in allowed:
                    raise UsageError(self.where(sec, key) + f"unknown key {key!r} in [{sec}]")
                self.values.setdefault(sec, {})[key] = val

    def where(self, section: str, key: str | None) -> str:
        if self.path is None:
            return ""
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        return f"{self.path}:{line}: " if line else f"{self.path}: "

    def get(self, section: str, key: str, conv=str, default=None):
        raw = self.values.get(section, {}).get(key)
        if raw is None or raw == "":
            return default
        try:
            if conv is bool:
                low = raw.lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                return low in ("1", "true", "yes", "on")
            return conv(raw)
        except ValueError:
            raise UsageError(self.where(section, key) + f"invalid value {raw!r} for {section}.{key}") from None

    def build(self, section: str, fn):
        """Call ``fn``; map a ConfigError to the line of the key it names."""
        try:
            return fn()
        except ConfigError as e:
            msg = str(e)
            key = next((k for k in self.values.get(section, {}) if re.search(rf"\b{k}\b", msg)), None)
            raise UsageError(self.where(section, key) + msg) from None


def _set(src: _Source, section: str, key: str, value) -> None:
    if value is not None:
        src.values.setdefault(section, {})[key] = str(value)
        src.lines.pop((section, key), None)


def load_run_config(args) -> RunConfig:
    src = _Source(getattr(args, "profile", "desk"), getattr(args, "config", None))
    _set(src, "run", "seed", getattr(args, "seed", None))
    _set(src, "window", "eval_size", getattr(args, "eval_size", None))
    _set(src, "window", "window", getattr(args, "window", None))
    _set(src, "window", "stride", getattr(args, "stride", None))
    _set(src, "train", "iterations", getattr(args, "iterations", None))
    seed = src.get("run", "seed", int, 0)

    agg_fields = {f.name: f.type for f in fields(AggregatorConfig)}
    convs = {"d_agg": int, "num_blocks": int, "window_size": int, "num_heads": int, "class_heads": int,
             "mlp_ratio": float, "attention_variant": str, "shift_second": bool}
    agg = src.build("aggregator", lambda: AggregatorConfig(
        **{k: src.get("aggregator", k, convs[k]) for k in agg_fields if src.get("aggregator", k) is not None}))
    model = src.build("head", lambda: ModelConfig(
        vision_dim=src.get("backbone", "vision_dim", int, 32),
        patch_size=src.get("backbone", "patch_size", int, 16),
        text_token_dim=src.get("backbone", "text_token_dim", int, 32),
        aggregator=agg,
        reducer_hidden=src.get("head", "reducer_hidden", int),
        reduce_order=src.get("head", "reduce_order", str, "reduce_after_up"),
        sigma_color=src.get("head", "sigma_color", float, 0.1),
        spatial_kernel=src.get("head", "spatial_kernel", str, "bilinear"),
        seed=seed))
    if model.spatial_kernel not in ("bilinear", "gaussian"):
        raise UsageError(src.where("head", "spatial_kernel") + f"unknown spatial kernel {model.spatial_kernel!r}")

    freeze_name = src.get("train", "freeze", str, "vision")
    if freeze_name not in FREEZE_ROWS:
        raise UsageError(src.where("train", "freeze") + f"freeze must be one of {sorted(FREEZE_ROWS)}")
    tcfg = src.build("train", lambda: TrainConfig(
        batch_size=src.get("train", "batch_size", int, 4),
        iterations=src.get("train", "iterations", int, 200),
        train_resolution=src.get("train", "train_resolution", int, 64),
        lr_head=src.get("train", "lr_head", float, 2e-4),
        lr_backbone=src.get("train", "lr_backbone", float, 2e-6),
        weight_decay=src.get("train", "weight_decay", float, 1e-4),
        freeze=FREEZE_ROWS[freeze_name],
        seed=seed,
        checkpoint_every=src.get("train", "checkpoint_every", int, 0),
        patch_size=model.patch_size))

    wcfg = src.build("window", lambda: SlidingWindowConfig(
        eval_resolution=src.get("window", "eval_size", int, 512),
        window=src.get("window", "window", int, 224),
        stride=src.get("window", "stride", int, 112)))
    if wcfg.window % model.patch_size:
        raise UsageError(src.where("window", "window") +
                         f"window {wcfg.window} is not divisible by patch size {model.patch_size}")

    data = DataConfig(
        dataset=src.get("data", "dataset", str, "synthetic"),
        synthetic_images=src.get("data", "synthetic_images", int, 16),
        synthetic_size=src.get("data", "synthetic_size", int, 64),
        vocab=src.get("data", "vocab"), classes=src.get("data", "classes"),
        raw_vocab=src.get("data", "raw_vocab"), subset=src.get("data", "subset"),
        templates=src.get("data", "templates"))
    for key in ("vocab", "raw_vocab", "subset", "templates"):
        p = getattr(data, key)
        if p is not None and not Path(p).is_file():
            raise UsageError(src.where("data", key) + f"file not found: {p}")
    if data.dataset != "synthetic" and not Path(data.dataset).is_dir():
        raise UsageError(src.where("data", "dataset") + f"dataset directory not found: {data.dataset}")
    if data.dataset == "synthetic" and data.synthetic_size % model.patch_size:
        raise UsageError(src.where("data", "synthetic_size") + "synthetic_size must be divisible by patch size")
    return RunConfig(model, tcfg, wcfg, data, seed, Path(getattr(args, "out", None) or "out"))


def _class_names(vocab_path: str | None, classes: str | None, dataset_id: str = "identity") -> list[str]:
    if vocab_path:
        if not Path(vocab_path).is_file():
            raise UsageError(f"vocabulary file not found: {vocab_path}")
        names = list(load_vocabulary(vocab_path))
    elif classes:
        names = [c.strip() for c in classes.split(",") if c.strip()]
    else:
        raise UsageError("a vocabulary is required (--vocab FILE or --classes a,b,c)")
    try:
        ClassVocabulary(tuple(names))
        return remap_class_names(dataset_id, names)
    except ValidationError as e:
        raise UsageError(str(e)) from None


def _load_model(path: str) -> SegmentationModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ----------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_run_config(args)
    d = cfg.data
    templates = load_templates(d.templates) if d.templates else None
    if d.dataset == "synthetic":
        names = _class_names(d.vocab, d.classes) if (d.vocab or d.classes) else list(SYNTHETIC_CLASSES)
        if len(names) != len(SYNTHETIC_CLASSES):
            raise UsageError(f"the synthetic dataset has {len(SYNTHETIC_CLASSES)} classes, got {len(names)} names")
        samples = synthetic_dataset(d.synthetic_images, d.synthetic_size, cfg.seed)
    else:
        if d.subset:
            if not d.raw_vocab:
                raise UsageError("data.subset requires data.raw_vocab (mask label names)")
            raw = list(load_vocabulary(d.raw_vocab))
            names = list(load_vocabulary(d.subset))
            samples = directory_dataset(d.dataset, names, raw)
        else:
            names = _class_names(d.vocab, d.classes)
            samples = directory_dataset(d.dataset)
    cfg.out.mkdir(parents=True, exist_ok=True)
    model = SegmentationModel(cfg.model, templates)
    state = make_state(model, cfg.train, names)
    extra = {"classes": names, "seed": cfg.seed}

    def checkpoint(st):
        save_checkpoint(st.model, cfg.out / f"checkpoint_{st.step}.ckpt", extra)

    with open(cfg.out / "train.log", "w", encoding="utf-8") as fh:
        losses = train(state, samples, cfg.train.iterations, fh, checkpoint)
    save_checkpoint(model, cfg.out / "checkpoint.ckpt", extra)
    print(f"trained {len(losses)} steps; loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"checkpoint {cfg.out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _window_cfg(args) -> SlidingWindowConfig:
    try:
        return SlidingWindowConfig(args.eval_size, args.window, args.stride)
    except ConfigError as e:
        raise UsageError(str(e)) from None


def cmd_predict(args) -> int:
    if not args.images:
        raise UsageError("no input images given")
    missing = [p for p in args.images if not Path(p).is_file()]
    if missing:
        raise UsageError(f"input image not found: {missing[0]}")
    names = _class_names(args.vocab, args.classes, args.dataset_id)
    wcfg = _window_cfg(args)
    model = _load_model(args.checkpoint)
    if wcfg.window % model.patch_size:
        raise UsageError(f"window {wcfg.window} is not divisible by patch size {model.patch_size}")
    out = Path(args.out or "out")
    with torch.no_grad():
        emb = model.embed_classes(names)
    palette = default_palette(len(names)) if args.palette else None
    for p in args.images:
        labels = predict_full(load_image(p), model, cfg=wcfg, embeddings=emb)
        path = save_mask(labels, out / f"{Path(p).stem}.png", palette)
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    modes = []
    if args.with_background:
        modes.append("with_background")
    if args.without_background or not modes:
        modes.append("without_background")
    if not Path(args.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {args.dataset}")
    raw = list(load_vocabulary(args.vocab)) if args.vocab else None
    if raw is None:
        raise UsageError("--vocab is required (dataset class names in mask-index order)")
    bg = args.background_index
    if bg is None:
        bg = default_registry().background_index(args.dataset_id)
    if "with_background" in modes and not args.oracle:
        if bg is None or not args.background_prompt:
            raise UsageError("--with-background needs --background-prompt and a background index "
                             "(--background-index or a registry entry)")
    if (args.checkpoint is None) == (not args.oracle):
        raise UsageError("pass exactly one of --checkpoint or --oracle")
    model = OracleSegmenter(args.dataset) if args.oracle else _load_model(args.checkpoint)
    reports = evaluate_directory(args.dataset, raw, model, _window_cfg(args), modes, args.dataset_id,
                                 bg, args.background_prompt)
    out = Path(args.out or "out")
    for mode, rep in reports.items():
        txt, _ = write_report(rep, out)
        print(txt.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_export_costmaps(args) -> int:
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    names = _class_names(args.vocab, args.classes, args.dataset_id)
    model = _load_model(args.checkpoint)
    try:
        check_divisible(args.size, args.size, model.patch_size)
    except CostAggError as e:
        raise UsageError(str(e)) from None
    image = resize_image(load_image(args.image)[None], (args.size, args.size))
    out = Path(args.out or "out")
    with torch.no_grad():
        emb = model.embed_classes(names)
        scores = model(image, embeddings=emb)
        if args.stage == "raw":
            maps = model.cost_volume(image, emb)[0]
        else:
            maps = scores[0]
    paths = export_costmaps(maps, out)
    seg = save_mask(argmax_labels(scores)[0], out / "segmentation.png", default_palette(len(names)))
    for p in [*paths, seg]:
        print(p)
    return EXIT_OK


def cmd_prepare_subset(args) -> int:
    if args.raw_classes:
        if not Path(args.raw_classes).is_file():
            raise UsageError(f"raw class list not found: {args.raw_classes}")
        raw = load_vocabulary(args.raw_classes)
    else:
        raw = coco_stuff_vocabulary()
    if args.mode == "curated":
        vocab = curated_subset()
        absent = [n for n in vocab if n not in raw.names]
        if absent:
            raise UsageError(f"curated classes missing from raw list: {absent}")
    else:
        try:
            vocab = sample_random_subset(raw, args.size, args.seed if args.seed is not None else 0)
        except ValidationError as e:
            raise UsageError(str(e)) from None
    out = Path(args.out or "subset.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vocabulary(vocab, out)
    print(out)
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="costagg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def shared(p, window=True):
        p.add_argument("--config", help="key = value config file with [sections]")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (file for prepare-subset)")
        if window:
            p.add_argument("--eval-size", type=int, default=512)
            p.add_argument("--window", type=int, default=224)
            p.add_argument("--stride", type=int, default=112)

    def vocab_args(p):
        p.add_argument("--vocab", help="class names, one per line")
        p.add_argument("--classes", help="comma-separated class names")
        p.add_argument("--dataset-id", default="identity", help="remap registry entry applied before prompting")

    p = sub.add_parser("train", help="train the aggregator and head")
    shared(p, window=False)
    p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment images")
    shared(p)
    vocab_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--palette", action="store_true", help="also write a colour render and palette file")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mIoU over a dataset directory")
    shared(p)
    p.add_argument("--vocab", help="dataset class names in mask-index order")
    p.add_argument("--dataset-id", default="identity")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use ground truth as the prediction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--with-background", action="store_true")
    p.add_argument("--without-background", action="store_true")
    p.add_argument("--background-index", type=int)
    p.add_argument("--background-prompt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-costmaps", help="write per-class cost maps and the segmentation")
    shared(p, window=False)
    vocab_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", choices=("raw", "aggregated"), default="raw")
    p.add_argument("--size", type=int, default=224, help="square resolution the image is resized to")
    p.set_defaults(func=cmd_export_costmaps)

    p = sub.add_parser("prepare-subset", help="write a training class subset")
    shared(p, window=False)
    p.add_argument("--raw-classes", help="raw class list (default: COCO-Stuff, 171 classes)")
    p.add_argument("--mode", choices=("curated", "random"), default="curated")
    p.add_argument("--size", type=int, default=41)
    p.set_defaults(func=cmd_prepare_subset)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except CostAggError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
