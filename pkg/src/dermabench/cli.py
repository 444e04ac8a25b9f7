"""
Command-line entry point.

    dermabench [--config FILE] [--seed N] [--output-dir DIR] [--workers N] COMMAND ...

Commands: split, train, evaluate, compare, predict, augment-preview.
Exit codes: 0 success, 1 runtime/data failure, 2 usage/config error.

Values resolve as flag > config file > built-in default; the effective
configuration is written to ``<output-dir>/config-<command>.json`` before a
command does any work.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .data import (
    AugmentationConfig,
    BatchStream,
    DatasetManifest,
    LesionLabel,
    Split,
    load_image,
    sample_rng,
    save_image,
    augment,
    scan_dataset,
    split_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DermabenchError,
    ImageDecodeError,
)
from .modelzoo import VALID_BACKBONE_NAMES, BackboneId, FreezePolicy, load_checkpoint, parse_backbone
from .training import TrainConfig, evaluate, load_run_records, run_experiment

logger = logging.getLogger("dermabench")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(DermabenchError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class CliConfig:
    # [data]
    root: Optional[str] = None
    train_fraction: float = 0.7
    seed: int = 0
    # [augmentation]
    zoom_range: float = 2.0
    rotation_range: float = 90.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    # [training]
    optimizer: str = "adam"
    loss: str = "categorical_crossentropy"
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    micro_batch_size: Optional[int] = None
    # [run]
    backbones: list = field(default_factory=lambda: list(VALID_BACKBONE_NAMES))
    output_dir: str = "dermabench-out"
    freeze_policy: str = FreezePolicy.FULL_FINE_TUNE.value
    weights: str = "imagenet"
    allow_download: bool = False
    deterministic: bool = False
    workers: int = 1

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.zoom_range, self.rotation_range, self.horizontal_flip, self.vertical_flip)

    def training(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            loss=self.loss,
            micro_batch_size=self.micro_batch_size,
        )


SECTIONS = {
    "data": ("root", "train_fraction", "seed"),
    "augmentation": ("zoom_range", "rotation_range", "horizontal_flip", "vertical_flip"),
    "training": ("optimizer", "loss", "learning_rate", "epochs", "batch_size", "micro_batch_size"),
    "run": ("backbones", "output_dir", "freeze_policy", "weights", "allow_download", "deterministic", "workers"),
}

_TYPES = {f.name: f.type for f in fields(CliConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    text = raw.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "Optional[int]":
            return None if text.lower() in ("", "none") else int(text)
        if kind == "list":
            return [parse_backbone(n).value for n in text.split(",") if n.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text or None if kind == "Optional[str]" else text


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise UsageError(f"config file not found: {path}")
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected {', '.join(SECTIONS)}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            values[key] = _coerce(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> tuple[CliConfig, dict]:
    config = CliConfig()
    sources = {f.name: "default" for f in fields(CliConfig)}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            setattr(config, key, value)
            sources[key] = "config"
    for key in sources:
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
            sources[key] = "flag"
    return config, sources


def echo_config(command: str, config: CliConfig, sources: dict) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"config-{command}.json"
    doc = {"command": command, "precedence": "flag > config file > default", "values": asdict(config), "sources": sources}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    overridden = {k: v for k, v in sources.items() if v != "default"}
    logger.info("resolved configuration written to %s (non-default sources: %s)", path, overridden or "none")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _format_counts(manifest: DatasetManifest) -> str:
    return ", ".join(
        f"{label} {c['train']}/{c['validation']}" for label, c in manifest.counts.items()
    )


def cmd_split(config: CliConfig, args) -> int:
    if not config.root:
        raise UsageError("split needs a dataset root (--root or [data] root)")
    if not Path(config.root).is_dir():
        raise UsageError(f"dataset root not found: {config.root}")
    manifest = split_manifest(scan_dataset(config.root), config.train_fraction, config.seed)
    path = manifest.save(Path(config.output_dir) / "manifest.json")
    print(_format_counts(manifest))
    logger.info("manifest written to %s", path)
    return EXIT_OK


def _load_or_make_manifest(config: CliConfig, manifest_arg) -> DatasetManifest:
    path = Path(manifest_arg) if manifest_arg else Path(config.output_dir) / "manifest.json"
    if path.is_file():
        return DatasetManifest.load(path)
    if manifest_arg:
        raise UsageError(f"manifest not found: {path}")
    if not config.root:
        raise UsageError(f"no manifest at {path}; run 'split' first or pass --root")
    if not Path(config.root).is_dir():
        raise UsageError(f"dataset root not found: {config.root}")
    manifest = split_manifest(scan_dataset(config.root), config.train_fraction, config.seed)
    manifest.save(path)
    return manifest


def cmd_train(config: CliConfig, args) -> int:
    train_config = config.training()
    augment_config = config.augmentation()
    manifest = _load_or_make_manifest(config, args.manifest)
    print(f"split: {_format_counts(manifest)}")
    for name in config.backbones:
        backbone = parse_backbone(name)
        print(f"training {backbone.display_name}: lr={train_config.learning_rate} "
              f"epochs={train_config.epochs} batch={train_config.batch_size}")
        record = run_experiment(
            manifest,
            backbone,
            train_config,
            augment_config,
            config.output_dir,
            freeze_policy=FreezePolicy(config.freeze_policy),
            weights=None if config.weights == "random" else config.weights,
            allow_download=config.allow_download,
            workers=config.workers,
            deterministic=config.deterministic,
        )
        print(f"{backbone.display_name}: val_acc={record.final_validation['accuracy']:.4f} "
              f"val_loss={record.final_validation['loss']:.4f} "
              f"test_acc={record.test_evaluation['accuracy']:.4f} checkpoint={record.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(config: CliConfig, args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = _load_or_make_manifest(config, args.manifest)
    stream = BatchStream(manifest, Split.VALIDATION, config.batch_size, None, config.seed, config.workers)
    result = evaluate(model, stream)
    report = metrics.classification_report(result.per_sample)
    name = model.backbone_id.display_name
    reports = Path(config.output_dir) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    stem = Path(args.checkpoint).stem
    doc = report.to_dict(model=name)
    (reports / f"metrics-{stem}.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    metrics.render_confusion(report.confusion, reports / f"confusion-{stem}.png", title=f"{name} confusion matrix")
    print(f"{name}: test_acc={result.accuracy:.4f} test_loss={result.loss:.4f} samples={result.n_samples}")
    print(metrics.render_report_table({name: report}), end="")
    return EXIT_OK


def cmd_compare(config: CliConfig, args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else Path(config.output_dir) / "runs"
    records = load_run_records(run_dir) if run_dir.is_dir() else []
    if not records:
        raise UsageError(f"no run records (run-*.json) found in {run_dir}")
    table = metrics.comparison_table(records, prior_work=args.with_literature)
    reports = Path(config.output_dir) / "reports"
    metrics.write_comparison(table, reports)
    for rec in records:
        tag = f"{rec.backbone_id}-{rec.seed}-{rec.created_at}"
        if rec.history.records:
            metrics.render_curves(rec.history, reports / "curves" / tag, model_name=rec.model_name)
        if rec.metrics:
            cm = metrics.ConfusionMatrix(**rec.metrics["confusion"])
            if cm.total:
                metrics.render_confusion(cm, reports / f"confusion-{tag}.png", title=f"{rec.model_name} confusion matrix")
    print(table.to_text(), end="")
    return EXIT_OK


@dataclass
class PredictionResult:
    image_path: str
    predicted_label: Optional[str]
    probabilities: Optional[list]
    checkpoint: str
    error: Optional[str] = None


def predict_images(model, paths, checkpoint_id: str, batch_size: int = 64) -> list:
    results = {}
    loaded = []
    for path in paths:
        try:
            loaded.append((path, load_image(path)))
        except ImageDecodeError as exc:
            results[path] = PredictionResult(str(path), None, None, checkpoint_id, error=str(exc))
    if loaded:
        probs = model.predict(np.stack([img for _, img in loaded]), batch_size=batch_size)
        for (path, _), row in zip(loaded, probs):
            label = LesionLabel.from_index(int(np.argmax(row)))
            results[path] = PredictionResult(str(path), label.value, [float(v) for v in row], checkpoint_id)
    return [results[p] for p in paths]


def cmd_predict(config: CliConfig, args) -> int:
    model = load_checkpoint(args.checkpoint)
    header = model.metadata
    checkpoint_id = f"{Path(args.checkpoint).name}@{header.get('created_at', '')}"
    results = predict_images(model, list(args.images), checkpoint_id, batch_size=config.batch_size)
    for r in results:
        if r.error:
            print(f"{r.image_path}: ERROR {r.error}")
        else:
            p = r.probabilities
            print(f"{r.image_path}: {r.predicted_label} (benign={p[0]:.4f}, malignant={p[1]:.4f})")
    out = Path(args.json) if args.json else Path(config.output_dir) / "reports" / "predictions.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([asdict(r) for r in results], indent=2) + "\n", encoding="utf-8")
    return EXIT_FAILURE if all(r.error for r in results) else EXIT_OK


def cmd_augment_preview(config: CliConfig, args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    aug = config.augmentation()
    image = load_image(args.image)
    out_dir = Path(config.output_dir) / "preview"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for i in range(args.n):
        variant = augment(image, aug, sample_rng(config.seed, 0, i))
        path = save_image(variant, out_dir / f"{stem}-aug-{i:03d}.png")
        print(path)
    return EXIT_OK


COMMANDS = {
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "predict": cmd_predict,
    "augment-preview": cmd_augment_preview,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _backbone_arg(text: str) -> str:
    if text.lower() == "all":
        return "all"
    try:
        return parse_backbone(text).value
    except ConfigError:
        raise argparse.ArgumentTypeError(
            f"invalid backbone {text!r}; choose from {', '.join(VALID_BACKBONE_NAMES)} or 'all'"
        ) from None


def _bool_flag(parser, name, dest, help_on):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    group.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [data] [augmentation] [training] [run]")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--output-dir", dest="output_dir", default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="image loading threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="dermabench", description=__doc__.split("\n\n")[0].strip(), parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("split", parents=[common], help="scan a dataset and write a stratified manifest")
    p.add_argument("--root", default=None)
    p.add_argument("--fraction", dest="train_fraction", type=float, default=None)

    p = sub.add_parser("train", parents=[common], help="fine-tune one or more backbones")
    p.add_argument("--root", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--backbone", type=_backbone_arg, action="append", default=None,
                   help=f"one of {', '.join(VALID_BACKBONE_NAMES)} or 'all' (repeatable)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--micro-batch", dest="micro_batch_size", type=int, default=None,
                   help="gradient-accumulation chunk size to bound memory")
    p.add_argument("--freeze", dest="freeze_policy", choices=[f.value for f in FreezePolicy], default=None)
    p.add_argument("--weights", choices=["imagenet", "random"], default=None)
    _bool_flag(p, "allow-download", "allow_download", "fetch missing pretrained weights")
    _bool_flag(p, "deterministic", "deterministic", "force deterministic torch kernels")
    _bool_flag(p, "horizontal-flip", "horizontal_flip", "random horizontal flips")
    _bool_flag(p, "vertical-flip", "vertical_flip", "random vertical flips")
    p.add_argument("--zoom-range", dest="zoom_range", type=float, default=None)
    p.add_argument("--rotation-range", dest="rotation_range", type=float, default=None)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--root", default=None)

    p = sub.add_parser("compare", parents=[common], help="comparison tables and plots from run records")
    p.add_argument("run_dir", nargs="?", default=None)
    p.add_argument("--with-literature", action="store_true", help="append published accuracies of earlier studies")

    p = sub.add_parser("predict", parents=[common], help="classify images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", default=None, help="where to write JSON results")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("augment-preview", parents=[common], help="write augmented variants of one image")
    p.add_argument("image")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--zoom-range", dest="zoom_range", type=float, default=None)
    p.add_argument("--rotation-range", dest="rotation_range", type=float, default=None)
    _bool_flag(p, "horizontal-flip", "horizontal_flip", "random horizontal flips")
    _bool_flag(p, "vertical-flip", "vertical_flip", "random vertical flips")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    backbones = getattr(args, "backbone", None)
    if backbones:
        args.backbones = list(VALID_BACKBONE_NAMES) if "all" in backbones else list(dict.fromkeys(backbones))
    try:
        config, sources = resolve_config(args)
        echo_config(args.command, config, sources)
        return COMMANDS[args.command](config, args)
    except (UsageError, ConfigError) as exc:
        print(f"dermabench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DermabenchError, OSError) as exc:
        print(f"dermabench {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
