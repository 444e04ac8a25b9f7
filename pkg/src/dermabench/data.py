"""
Dataset ingest, deterministic stratified split, image loading and augmentation.

Expected layout::

    <root>/benign/*.{jpg,jpeg,png}
    <root>/malignant/*.{jpg,jpeg,png}

Everything random in this module is derived from explicit integer seeds so
that a split or an epoch of batches can be reproduced exactly.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    ConfigError,
    DatasetError,
    DatasetStructureError,
    EmptyClassError,
    ImageDecodeError,
)

logger = logging.getLogger(__name__)

IMAGE_SIZE = (224, 224)
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
NUM_CLASSES = 2


class LesionLabel(enum.Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"

    @property
    def index(self) -> int:
        return 0 if self is LesionLabel.BENIGN else 1

    @classmethod
    def from_index(cls, index: int) -> "LesionLabel":
        if index == 0:
            return cls.BENIGN
        if index == 1:
            return cls.MALIGNANT
        raise ValueError(f"class index must be 0 or 1, got {index!r}")


CLASS_ORDER = (LesionLabel.BENIGN, LesionLabel.MALIGNANT)


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"


def encode_label(label: LesionLabel) -> tuple[int, np.ndarray]:
    """Return ``(class_index, one_hot)``; benign is class 0, malignant class 1."""
    one_hot = np.zeros(NUM_CLASSES, dtype=np.float32)
    one_hot[label.index] = 1.0
    return label.index, one_hot


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # POSIX path relative to the manifest root
    label: LesionLabel
    split: Optional[Split] = None


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    entries: tuple[ManifestEntry, ...]
    seed: Optional[int] = None
    train_fraction: Optional[float] = None
    skipped: tuple[str, ...] = field(default=(), compare=False)

    @property
    def is_split(self) -> bool:
        return bool(self.entries) and all(e.split is not None for e in self.entries)

    @property
    def counts(self) -> dict:
        counts = {}
        for label in CLASS_ORDER:
            members = [e for e in self.entries if e.label is label]
            counts[label.value] = {
                "total": len(members),
                Split.TRAIN.value: sum(e.split is Split.TRAIN for e in members),
                Split.VALIDATION.value: sum(e.split is Split.VALIDATION for e in members),
            }
        return counts

    def select(self, split: Split) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split is split]

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "entries": [
                {
                    "path": e.path,
                    "label": e.label.value,
                    "split": e.split.value if e.split else None,
                }
                for e in self.entries
            ],
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        entries = tuple(
            ManifestEntry(
                path=e["path"],
                label=LesionLabel(e["label"]),
                split=Split(e["split"]) if e.get("split") else None,
            )
            for e in doc["entries"]
        )
        manifest = cls(
            root=doc["root"],
            entries=entries,
            seed=doc.get("seed"),
            train_fraction=doc.get("train_fraction"),
        )
        if "counts" in doc and doc["counts"] != manifest.counts:
            raise DatasetError("manifest counts do not match its entries")
        return manifest

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
    except Exception:  # PIL raises a zoo of exception types for bad files
        return False
    return True


def scan_dataset(root, verify: bool = True) -> DatasetManifest:
    """Enumerate ``root/benign`` and ``root/malignant`` into an unsplit manifest.

    Files that fail to decode are logged and left out. Entries are sorted by
    relative path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")

    entries = []
    skipped = []
    for label in CLASS_ORDER:
        class_dir = root / label.value
        if not class_dir.is_dir():
            raise DatasetStructureError(label.value, root)
        n_ok = 0
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            rel = path.relative_to(root).as_posix()
            if verify and not _is_decodable(path):
                logger.warning("skipping undecodable image %s", path)
                skipped.append(rel)
                continue
            entries.append(ManifestEntry(rel, label))
            n_ok += 1
        if n_ok == 0:
            raise EmptyClassError(label.value, root)

    entries.sort(key=lambda e: e.path)
    return DatasetManifest(
        root=os.path.abspath(root), entries=tuple(entries), skipped=tuple(skipped)
    )


def n_train_for(count: int, train_fraction: float) -> int:
    # go through the decimal repr so 0.29 * 100 floors to 29, not 28
    return math.floor(Fraction(repr(float(train_fraction))) * count)


def split_manifest(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Assign each entry to train or validation, stratified per class.

    Per class, ``floor(train_fraction * n)`` entries go to train. Membership
    is a permutation drawn from ``(seed, class index)`` over the
    path-sorted entries, so it does not depend on the input order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if any(e.split is not None for e in manifest.entries):
        raise ConfigError("manifest is already split")

    assignment = {}
    for label in CLASS_ORDER:
        members = sorted((e for e in manifest.entries if e.label is label), key=lambda e: e.path)
        if len(members) < 2:
            logger.warning(
                "class '%s' has %d entries; cannot hold out a validation set for it",
                label.value,
                len(members),
            )
        n_train = n_train_for(len(members), train_fraction)
        rng = np.random.default_rng([int(seed), label.index])
        order = rng.permutation(len(members))
        for rank, idx in enumerate(order):
            assignment[members[idx].path] = Split.TRAIN if rank < n_train else Split.VALIDATION

    entries = tuple(replace(e, split=assignment[e.path]) for e in sorted(manifest.entries, key=lambda e: e.path))
    return DatasetManifest(
        root=manifest.root,
        entries=entries,
        seed=int(seed),
        train_fraction=float(train_fraction),
        skipped=manifest.skipped,
    )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def load_image(path, target_size: tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Decode ``path`` into a float32 ``(H, W, 3)`` array scaled to [0, 1].

    Grayscale and palette images are converted to RGB; the image is resized
    bilinearly when its size differs from ``target_size`` (height, width).
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            height, width = target_size
            if img.size != (width, height):
                img = img.resize((width, height), Image.BILINEAR)
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    return pixels


def save_image(pixels: np.ndarray, path) -> Path:
    """Write a [0, 1] float image as an 8-bit PNG."""
    path = Path(path)
    data = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Random zoom, rotation and flips applied to training images.

    ``zoom_range`` z > 1 draws a scale factor uniformly from [1/z, z];
    0 or 1 disables zoom. ``rotation_range`` r draws an angle in degrees
    uniformly from [-r, r].
    """

    zoom_range: float = 2.0
    rotation_range: float = 90.0
    horizontal_flip: bool = True
    vertical_flip: bool = True

    def __post_init__(self):
        if self.zoom_range < 0 or 0 < self.zoom_range < 1:
            raise ConfigError(
                f"zoom_range must be 0 (off) or >= 1, got {self.zoom_range}"
            )
        if not 0 <= self.rotation_range <= 360:
            raise ConfigError(f"rotation_range must lie in [0, 360], got {self.rotation_range}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, False, False)

    @property
    def is_identity(self) -> bool:
        return (
            self.zoom_range <= 1
            and self.rotation_range == 0
            and not self.horizontal_flip
            and not self.vertical_flip
        )

    def to_dict(self) -> dict:
        return {
            "zoom_range": float(self.zoom_range),
            "rotation_range": float(self.rotation_range),
            "horizontal_flip": bool(self.horizontal_flip),
            "vertical_flip": bool(self.vertical_flip),
        }


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1, :])


def vertical_flip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[::-1, :, :])


def _zoom_rotate(image: np.ndarray, scale: float, angle_deg: float) -> np.ndarray:
    # one bilinear resampling for the combined similarity transform;
    # pixels that map outside the frame take the nearest edge value
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # output -> input coordinate map in (row, col)
    matrix = np.array([[cos, -sin], [sin, cos]]) / scale
    center = (np.array(image.shape[:2], dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        ndimage.affine_transform(
            image[:, :, c], matrix, offset=offset, output=out[:, :, c], order=1, mode="nearest"
        )
    np.clip(out, 0.0, 1.0, out=out)
    return out


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply zoom -> rotation -> horizontal flip -> vertical flip.

    Random draws happen in that order, and only for enabled transforms, so
    the same generator state always yields the same output.
    """
    if config.is_identity:
        return image

    scale = 1.0
    angle = 0.0
    if config.zoom_range > 1:
        scale = float(rng.uniform(1.0 / config.zoom_range, config.zoom_range))
    if config.rotation_range > 0:
        angle = float(rng.uniform(-config.rotation_range, config.rotation_range))

    out = image
    if scale != 1.0 or angle != 0.0:
        out = _zoom_rotate(np.asarray(image, dtype=np.float32), scale, angle)
    if config.horizontal_flip and rng.random() < 0.5:
        out = horizontal_flip(out)
    if config.vertical_flip and rng.random() < 0.5:
        out = vertical_flip(out)
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; independent of worker count and shuffle order."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class BatchStream:
    """Re-iterable source of ``(images, one_hot_labels)`` batches for one split.

    Train streams are reshuffled every epoch from ``(seed, epoch)``;
    validation streams always come out in manifest order and are never
    augmented. Loading may use several threads but batches are yielded in
    order, and augmentation randomness is keyed on the sample, so results
    do not depend on ``workers``.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: Split,
        batch_size: int,
        augment_config: Optional[AugmentationConfig] = None,
        seed: int = 0,
        workers: int = 1,
        target_size: tuple[int, int] = IMAGE_SIZE,
        shuffle: Optional[bool] = None,
    ):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        if not manifest.is_split:
            raise ConfigError("manifest must be split before batching")
        if split is Split.VALIDATION and augment_config is not None and not augment_config.is_identity:
            raise ConfigError("the validation split is never augmented")
        self.manifest = manifest
        self.split = split
        self.entries = manifest.select(split)
        self.batch_size = batch_size
        self.augment_config = augment_config
        self.seed = seed
        self.workers = workers
        self.target_size = target_size
        self.shuffle = (split is Split.TRAIN) if shuffle is None else shuffle

    @property
    def n_samples(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return math.ceil(self.n_samples / self.batch_size)

    def labels(self) -> list[int]:
        return [e.label.index for e in self.entries]

    def _order(self, epoch: int) -> np.ndarray:
        if self.shuffle:
            return np.random.default_rng([int(self.seed), int(epoch)]).permutation(self.n_samples)
        return np.arange(self.n_samples)

    def _load(self, index: int, epoch: int) -> np.ndarray:
        entry = self.entries[index]
        image = load_image(self.manifest.resolve(entry), self.target_size)
        if self.augment_config is not None:
            image = augment(image, self.augment_config, sample_rng(self.seed, epoch, index))
        return image

    def epoch(self, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self._order(epoch)
        pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        try:
            for start in range(0, self.n_samples, self.batch_size):
                idx = [int(i) for i in order[start : start + self.batch_size]]
                if pool is None:
                    images = [self._load(i, epoch) for i in idx]
                else:
                    images = list(pool.map(lambda i: self._load(i, epoch), idx))
                labels = np.stack([encode_label(self.entries[i].label)[1] for i in idx])
                yield np.stack(images).astype(np.float32, copy=False), labels
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

    def __iter__(self):
        return self.epoch(0)


def batch_iterator(
    manifest: DatasetManifest,
    split: Split,
    batch_size: int,
    augment_config: Optional[AugmentationConfig] = None,
    seed: int = 0,
    epoch: int = 0,
    workers: int = 1,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield one epoch of batches; see :class:`BatchStream`."""
    stream = BatchStream(manifest, split, batch_size, augment_config, seed, workers)
    return stream.epoch(epoch)


def manifest_with_all(manifest: DatasetManifest, split: Split) -> DatasetManifest:
    """Copy of ``manifest`` with every entry assigned to ``split`` (toy experiments)."""
    return replace(manifest, entries=tuple(replace(e, split=split) for e in manifest.entries))


def validate_layout(root) -> dict:
    """Check an ISIC-style directory and return per-class image counts."""
    manifest = scan_dataset(root)
    return {label: c["total"] for label, c in manifest.counts.items()}
