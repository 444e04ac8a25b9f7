"""Fine-tuning loop, evaluation and the end-to-end experiment runner."""

from __future__ import annotations

import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .data import AugmentationConfig, BatchStream, DatasetManifest, Split
from .errors import ConfigError, DivergenceError, EvaluationError
from .metrics import HISTORY_HEADER
from .modelzoo import BackboneId, FreezePolicy, build_model, parse_backbone, save_checkpoint

logger = logging.getLogger(__name__)

EVALUATION_NOTE = (
    "single 70/30-style holdout: per-epoch 'validation' metrics and the final "
    "'test' evaluation are both computed on the held-out validation split"
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "categorical_crossentropy"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # Gradient accumulation chunk; None processes each batch in one pass.
    # Batch-norm statistics are then per chunk rather than per batch.
    micro_batch_size: Optional[int] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.micro_batch_size is not None and self.micro_batch_size < 1:
            raise ConfigError(f"micro_batch_size must be >= 1, got {self.micro_batch_size}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.loss != "categorical_crossentropy":
            raise ConfigError(f"only categorical_crossentropy is supported, got {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    seconds: float = 0.0
    val_samples: int = 0


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_list(self) -> list:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows) -> "TrainingHistory":
        return cls([EpochRecord(**r) for r in rows])


@dataclass
class EvaluationResult:
    loss: float
    accuracy: float
    per_sample: list  # (true_index, predicted_index, probability tuple), in stream order

    @property
    def n_samples(self) -> int:
        return len(self.per_sample)


def _epoch_batches(stream, epoch: int):
    if hasattr(stream, "epoch"):
        return stream.epoch(epoch)
    return iter(stream)


def _true_indices(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(int)


def evaluate(model, stream, epoch: int = 0) -> EvaluationResult:
    """Score ``model`` on an un-augmented, fixed-order stream.

    ``model`` only needs a ``predict(images) -> probabilities`` method.
    Predictions take the argmax, with ties going to the lower class index.
    The loss is the mean categorical cross-entropy.
    """
    per_sample = []
    nll = 0.0
    correct = 0
    for images, labels in _epoch_batches(stream, epoch):
        probs = np.asarray(model.predict(images), dtype=np.float64)
        truth = _true_indices(labels)
        preds = probs.argmax(axis=1)  # first maximum -> lower index on ties
        p_true = probs[np.arange(len(truth)), truth]
        nll += float(-np.log(np.clip(p_true, 1e-12, 1.0)).sum())
        correct += int((preds == truth).sum())
        per_sample.extend(
            (int(t), int(p), tuple(float(v) for v in row)) for t, p, row in zip(truth, preds, probs)
        )
    if not per_sample:
        raise EvaluationError("cannot evaluate on an empty stream")
    return EvaluationResult(nll / len(per_sample), correct / len(per_sample), per_sample)


def _stream_length(stream) -> Optional[int]:
    try:
        return len(stream)
    except TypeError:
        return None


def train(model, train_stream, val_stream, config: TrainConfig, on_epoch_end: Optional[Callable] = None):
    """Run ``config.epochs`` epochs of Adam on categorical cross-entropy.

    After every epoch the whole validation stream is evaluated and one
    :class:`EpochRecord` is appended to the history (and passed to
    ``on_epoch_end`` if given). The returned model holds the last epoch's
    weights. A non-finite loss aborts with :class:`DivergenceError`.
    """
    history = TrainingHistory()
    if config.epochs == 0:
        return model, history
    if _stream_length(train_stream) == 0:
        raise ConfigError("training stream is empty")

    torch.manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.epsilon
    )

    for epoch in range(config.epochs):
        started = time.perf_counter()
        model.train()
        loss_sum = 0.0
        correct = 0
        seen = 0
        for batch_idx, (images, labels) in enumerate(_epoch_batches(train_stream, epoch)):
            x_all = torch.from_numpy(model.preprocess(images))
            y_all = torch.from_numpy(_true_indices(labels)).long()
            n = len(y_all)
            chunk = config.micro_batch_size or n
            optimizer.zero_grad(set_to_none=True)
            batch_loss = 0.0
            for start in range(0, n, chunk):
                x = x_all[start : start + chunk]
                y = y_all[start : start + chunk]
                logits = model.logits(x)
                loss = F.cross_entropy(logits, y, reduction="sum") / n
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise DivergenceError(epoch + 1, batch_idx + 1, value)
                loss.backward()
                batch_loss += value
                correct += int((logits.detach().argmax(dim=1) == y).sum())
            optimizer.step()
            loss_sum += batch_loss * n
            seen += n
        if seen == 0:
            raise ConfigError("training stream is empty")

        val = evaluate(model, val_stream)
        record = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / seen,
            train_accuracy=correct / seen,
            val_loss=val.loss,
            val_accuracy=val.accuracy,
            seconds=time.perf_counter() - started,
            val_samples=val.n_samples,
        )
        if not math.isfinite(record.val_loss):
            raise DivergenceError(epoch + 1, "validation", record.val_loss)
        history.records.append(record)
        logger.info(
            "epoch %d/%d  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  (%.1fs)",
            record.epoch, config.epochs, record.train_loss, record.train_accuracy,
            record.val_loss, record.val_accuracy, record.seconds,
        )
        if on_epoch_end is not None:
            on_epoch_end(record)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    backbone_id: str
    model_name: str
    seed: int
    train_config: dict
    augment_config: Optional[dict]
    manifest_fingerprint: Optional[str]
    history: TrainingHistory
    final_validation: dict  # {"loss", "accuracy", "samples"}
    test_evaluation: dict  # {"loss", "accuracy", "samples"}
    metrics: Optional[dict]  # metrics JSON: model, accuracy, per_class, confusion
    checkpoint_path: Optional[str]
    freeze_policy: str = FreezePolicy.FULL_FINE_TUNE.value
    weights_source: str = "imagenet"
    environment: dict = field(default_factory=dict)
    evaluation_note: str = EVALUATION_NOTE
    created_at: str = ""

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["history"] = self.history.to_list()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        doc = dict(doc)
        doc["history"] = TrainingHistory.from_list(doc.get("history", []))
        return cls(**doc)

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)
        return path


def load_run_record(path) -> RunRecord:
    with open(path, encoding="utf-8") as fh:
        return RunRecord.from_dict(json.load(fh))


def load_run_records(run_dir) -> list:
    return [load_run_record(p) for p in sorted(Path(run_dir).glob("run-*.json"))]


def environment_note(deterministic: bool) -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "platform": platform.platform(),
        "threads": torch.get_num_threads(),
        "deterministic_algorithms": deterministic,
    }


def _ensure_writable(output_dir: Path) -> dict:
    layout = {name: output_dir / name for name in ("runs", "checkpoints", "reports")}
    for d in layout.values():
        d.mkdir(parents=True, exist_ok=True)
    probe = layout["runs"] / ".write-probe"
    probe.write_text("")
    probe.unlink()
    return layout


def run_experiment(
    manifest: DatasetManifest,
    backbone_id,
    train_config: TrainConfig,
    augment_config: Optional[AugmentationConfig],
    output_dir,
    *,
    freeze_policy: FreezePolicy = FreezePolicy.FULL_FINE_TUNE,
    weights: Optional[str] = "imagenet",
    allow_download: bool = False,
    workers: int = 1,
    deterministic: bool = False,
    model=None,
) -> RunRecord:
    """Build, train, evaluate and checkpoint one backbone; persist a RunRecord.

    Output layout under ``output_dir``: ``runs/run-<backbone>-<seed>-<ts>.json``
    (+ ``-history.csv``), ``checkpoints/<backbone>-<seed>-<ts>.ckpt`` and
    ``reports/metrics-<backbone>-<seed>-<ts>.json``. Files written by a
    failed run are removed before the error propagates.
    """
    backbone_id = parse_backbone(backbone_id)
    output_dir = Path(output_dir)
    layout = _ensure_writable(output_dir)
    if not manifest.is_split:
        raise ConfigError("run_experiment needs a split manifest")

    seed = train_config.seed
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    tag = f"{backbone_id.value}-{seed}-{stamp}"
    record_path = layout["runs"] / f"run-{tag}.json"
    csv_path = layout["runs"] / f"run-{tag}-history.csv"
    ckpt_path = layout["checkpoints"] / f"{tag}.ckpt"
    metrics_path = layout["reports"] / f"metrics-{tag}.json"
    created = []

    previous_det = torch.are_deterministic_algorithms_enabled()
    try:
        if deterministic:
            torch.use_deterministic_algorithms(True)
        if model is None:
            model = build_model(
                backbone_id, freeze_policy, weights=weights, head_seed=seed, allow_download=allow_download
            )
        train_stream = BatchStream(manifest, Split.TRAIN, train_config.batch_size, augment_config, seed, workers)
        val_stream = BatchStream(manifest, Split.VALIDATION, train_config.batch_size, None, seed, workers)
        expected_val = sum(c[Split.VALIDATION.value] for c in manifest.counts.values())

        with open(csv_path, "w", encoding="utf-8", newline="\n") as csv_fh:
            created.append(csv_path)
            csv_fh.write(",".join(HISTORY_HEADER) + "\n")
            csv_fh.flush()

            def _append(rec: EpochRecord):
                if rec.val_samples != expected_val:
                    raise EvaluationError(
                        f"validation covered {rec.val_samples} samples, manifest has {expected_val}"
                    )
                csv_fh.write(
                    f"{rec.epoch},{rec.train_loss!r},{rec.train_accuracy!r},"
                    f"{rec.val_loss!r},{rec.val_accuracy!r}\n"
                )
                csv_fh.flush()

            model, history = train(model, train_stream, val_stream, train_config, on_epoch_end=_append)

        test = evaluate(model, val_stream)
        report = metrics.classification_report(test.per_sample)
        metrics_doc = report.to_dict(model=backbone_id.display_name)

        if history.records:
            last = history.records[-1]
            final_val = {"loss": last.val_loss, "accuracy": last.val_accuracy, "samples": last.val_samples}
        else:
            final_val = {"loss": test.loss, "accuracy": test.accuracy, "samples": test.n_samples}

        created.append(ckpt_path)
        save_checkpoint(model, ckpt_path, training_config=train_config.to_dict())

        created.append(metrics_path)
        metrics_path.write_text(json.dumps(metrics_doc, indent=2) + "\n", encoding="utf-8")

        record = RunRecord(
            backbone_id=backbone_id.value,
            model_name=backbone_id.display_name,
            seed=seed,
            train_config=train_config.to_dict(),
            augment_config=augment_config.to_dict() if augment_config else None,
            manifest_fingerprint=manifest.fingerprint(),
            history=history,
            final_validation=final_val,
            test_evaluation={"loss": test.loss, "accuracy": test.accuracy, "samples": test.n_samples},
            metrics=metrics_doc,
            checkpoint_path=str(ckpt_path),
            freeze_policy=model.freeze_policy.value,
            weights_source=model.weights_source,
            environment=environment_note(deterministic),
            created_at=stamp,
        )
        created.append(record_path)
        record.save(record_path)
        return record
    except Exception:
        # an interrupt (not an error) keeps the flushed history prefix
        for path in created:
            if path.exists():
                path.unlink()
        raise
    finally:
        torch.use_deterministic_algorithms(previous_det)
