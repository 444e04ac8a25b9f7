"""
Confusion-matrix metrics, per-class reports, plots and comparison tables.

Metrics with a zero denominator raise :class:`UndefinedMetricError` instead
of returning 0. Reports store full precision; rounding happens only when a
table is rendered.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_ORDER, LesionLabel  # noqa: E402
from .errors import RenderError, UndefinedMetricError  # noqa: E402

logger = logging.getLogger(__name__)

UNDEFINED = "—"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: LesionLabel = LesionLabel.MALIGNANT

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """Same predictions with the other class treated as positive."""
        other = LesionLabel.BENIGN if self.positive_class is LesionLabel.MALIGNANT else LesionLabel.MALIGNANT
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp, other)

    def with_positive(self, label: LesionLabel) -> "ConfusionMatrix":
        return self if label is self.positive_class else self.swapped()

    def grid(self) -> np.ndarray:
        """2x2 counts, rows = true class, columns = predicted, positive class first."""
        return np.array([[self.tp, self.fn], [self.fp, self.tn]])

    def class_names(self) -> list[str]:
        neg = LesionLabel.BENIGN if self.positive_class is LesionLabel.MALIGNANT else LesionLabel.MALIGNANT
        return [self.positive_class.value, neg.value]

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_matrix(pairs: Iterable[Sequence[int]], positive_class: LesionLabel = LesionLabel.MALIGNANT) -> ConfusionMatrix:
    """Count ``(true_index, predicted_index)`` pairs against ``positive_class``."""
    pos = positive_class.index
    tp = fp = fn = tn = 0
    for pair in pairs:
        true, pred = int(pair[0]), int(pair[1])
        if true not in (0, 1) or pred not in (0, 1) or true != pair[0] or pred != pair[1]:
            raise ValueError(f"class indices must be 0 or 1, got {tuple(pair[:2])!r}")
        if true == pos:
            if pred == pos:
                tp += 1
            else:
                fn += 1
        elif pred == pos:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn, positive_class)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy is undefined for an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision is undefined: no positive predictions")
    return cm.tp / (cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("recall is undefined: no positive samples")
    return cm.tp / (cm.tp + cm.fn)


def f1_score(cm: ConfusionMatrix) -> float:
    p = precision(cm)
    r = recall(cm)
    if p + r == 0:
        raise UndefinedMetricError("f1 is undefined: precision and recall are both 0")
    return 2 * (r * p) / (r + p)


def _or_none(fn, cm):
    try:
        return fn(cm)
    except UndefinedMetricError:
        return None


@dataclass(frozen=True)
class ClassMetrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    support: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support}


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict  # LesionLabel -> ClassMetrics
    accuracy: Optional[float]
    confusion: ConfusionMatrix

    def to_dict(self, model: str = "") -> dict:
        return {
            "model": model,
            "accuracy": self.accuracy,
            "per_class": {label.value: self.per_class[label].to_dict() for label in CLASS_ORDER},
            "confusion": self.confusion.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        per_class = {
            label: ClassMetrics(**doc["per_class"][label.value]) for label in CLASS_ORDER
        }
        return cls(per_class, doc.get("accuracy"), ConfusionMatrix(**doc["confusion"]))


def report_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    per_class = {}
    for label in CLASS_ORDER:
        m = cm.with_positive(label)
        per_class[label] = ClassMetrics(
            precision=_or_none(precision, m),
            recall=_or_none(recall, m),
            f1=_or_none(f1_score, m),
            support=m.tp + m.fn,
        )
    return MetricsReport(per_class, _or_none(accuracy, cm), cm.with_positive(LesionLabel.MALIGNANT))


def classification_report(per_sample: Sequence[Sequence]) -> MetricsReport:
    """Per-class precision/recall/F1 with each class taken in turn as positive.

    ``per_sample`` holds ``(true_index, predicted_index, ...)`` tuples, as
    returned by :func:`dermabench.training.evaluate`.
    """
    if len(per_sample) == 0:
        raise UndefinedMetricError("classification report needs at least one sample")
    cm = confusion_matrix([(s[0], s[1]) for s in per_sample])
    return report_from_confusion(cm)


def _fmt(value: Optional[float], digits: int) -> str:
    return UNDEFINED if value is None else f"{value:.{digits}f}"


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_report_table(reports: dict) -> str:
    """Precision / recall / F1 per model and class, two decimals.

    ``reports`` maps model name to :class:`MetricsReport`.
    """
    rows = []
    for name, report in reports.items():
        for i, label in enumerate(CLASS_ORDER):
            m = report.per_class[label]
            rows.append([
                name if i == 0 else "",
                label.value.capitalize(),
                _fmt(m.precision, 2),
                _fmt(m.recall, 2),
                _fmt(m.f1, 2),
            ])
    return _aligned(["Model", "Class", "Precision", "Recall", "F1 Score"], rows)


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

_PLOT_STYLE = {
    "figure.figsize": (6.4, 4.8),
    "figure.dpi": 100,
    "font.size": 10,
    "svg.hashsalt": "dermabench",
}
_SAVE_KW = {"format": "png", "dpi": 100, "metadata": {"Software": None}}

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def history_to_csv(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in history.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_accuracy), repr(r.val_loss), repr(r.val_accuracy)])
    return path


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_HEADER:
            raise RenderError(f"{path}: unexpected history header {reader.fieldnames}")
        return [
            {"epoch": int(row["epoch"]), **{k: float(row[k]) for k in HISTORY_HEADER[1:]}}
            for row in reader
        ]


def _plot_series(epochs, train, val, ylabel, title, path):
    with plt.rc_context(_PLOT_STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, train, marker="o", label="train")
        ax.plot(epochs, val, marker="o", label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)


def _render_rows(rows: list[dict], prefix: Path, model_name: str) -> dict:
    if not rows:
        raise RenderError("cannot render curves for an empty history")
    epochs = [r["epoch"] for r in rows]
    paths = {
        "accuracy": prefix.with_name(prefix.name + "-accuracy.png"),
        "loss": prefix.with_name(prefix.name + "-loss.png"),
    }
    _plot_series(epochs, [r["train_acc"] for r in rows], [r["val_acc"] for r in rows],
                 "accuracy", f"Model accuracy of {model_name}", paths["accuracy"])
    _plot_series(epochs, [r["train_loss"] for r in rows], [r["val_loss"] for r in rows],
                 "loss", f"Model loss of {model_name}", paths["loss"])
    return paths


def render_curves(history, output_path, model_name: str = "model") -> dict:
    """Write ``<output_path>-accuracy.png``, ``-loss.png`` and ``-history.csv``.

    The plots are drawn from the CSV as re-read from disk, so
    :func:`render_curves_from_csv` on that CSV gives byte-identical images.
    """
    if not history.records:
        raise RenderError("cannot render curves for an empty history")
    prefix = Path(output_path)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = history_to_csv(history, prefix.with_name(prefix.name + "-history.csv"))
    paths = _render_rows(read_history_csv(csv_path), prefix, model_name)
    paths["csv"] = csv_path
    return paths


def render_curves_from_csv(csv_path, output_path, model_name: str = "model") -> dict:
    prefix = Path(output_path)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    return _render_rows(read_history_csv(csv_path), prefix, model_name)


@dataclass
class ConfusionPlot:
    path: Path
    class_names: list[str]
    annotations: np.ndarray  # integer counts read back from the drawn cell labels


def render_confusion(cm: ConfusionMatrix, output_path, title: str = "Confusion matrix") -> ConfusionPlot:
    """Annotated 2x2 heatmap; rows are true classes, columns predictions, positive class first."""
    if cm.total == 0:
        raise RenderError("cannot render an empty confusion matrix")
    grid = cm.grid()
    names = cm.class_names()
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_PLOT_STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.2))
        im = ax.imshow(grid, cmap="Blues", vmin=0)
        fig.colorbar(im, ax=ax)
        ax.set_xticks([0, 1], labels=names)
        ax.set_yticks([0, 1], labels=names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        threshold = grid.max() / 2.0
        for i in range(2):
            for j in range(2):
                ax.text(j, i, str(grid[i, j]), ha="center", va="center",
                        color="white" if grid[i, j] > threshold else "black", gid=f"cell-{i}-{j}")
        annotations = np.zeros((2, 2), dtype=int)
        for text in ax.texts:
            gid = text.get_gid() or ""
            if gid.startswith("cell-"):
                _, i, j = gid.split("-")
                annotations[int(i), int(j)] = int(text.get_text())
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
    return ConfusionPlot(path, names, annotations)


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    val_accuracy: float
    val_loss: float
    test_accuracy: float


@dataclass(frozen=True)
class PriorWorkRow:
    reference: str
    architecture: str
    validation_accuracy: float


def load_prior_work() -> list[PriorWorkRow]:
    text = resources.files("dermabench.resources").joinpath("prior_work.json").read_text("utf-8")
    return [PriorWorkRow(**row) for row in json.loads(text)["rows"]]


@dataclass
class ComparisonTable:
    rows: list
    prior_work: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # model name -> MetricsReport

    def to_text(self) -> str:
        out = [
            "Validation and test-set results\n",
            _aligned(
                ["Model", "Validation Accuracy", "Validation Loss", "Test Set Accuracy"],
                [[r.model, f"{r.val_accuracy:.4f}", f"{r.val_loss:.4f}", f"{r.test_accuracy:.4f}"] for r in self.rows],
            ),
        ]
        if self.reports:
            out += ["\nPer-class precision, recall and F1\n", render_report_table(self.reports)]
        if self.prior_work:
            out += [
                "\nLiterature values (reported by other studies, not recomputed here)\n",
                _aligned(
                    ["Reference", "Architecture", "Validation Acc"],
                    [[p.reference, p.architecture, f"{p.validation_accuracy:.3f}"] for p in self.prior_work],
                ),
            ]
        return "".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source", "model", "val_accuracy", "val_loss", "test_accuracy"])
        for r in self.rows:
            writer.writerow(["this harness", r.model, f"{r.val_accuracy:.4f}", f"{r.val_loss:.4f}", f"{r.test_accuracy:.4f}"])
        for p in self.prior_work:
            writer.writerow([f"literature: {p.reference}", p.architecture, f"{p.validation_accuracy:.3f}", "", ""])
        return buf.getvalue()


def comparison_table(run_records: Sequence, prior_work: Optional[bool | Sequence[PriorWorkRow]] = None) -> ComparisonTable:
    """Tabulate run records; values are copied from the records, not recomputed.

    Pass ``prior_work=True`` to append the bundled literature values, or a
    list of :class:`PriorWorkRow` to append those instead.
    """
    if not run_records:
        raise ValueError("comparison_table needs at least one run record")
    seen = {}
    for rec in run_records:
        seen[rec.model_name] = seen.get(rec.model_name, 0) + 1

    rows = []
    reports = {}
    for rec in run_records:
        name = rec.model_name
        if seen[name] > 1:
            name = f"{name} (seed {rec.seed})"
            logger.warning("duplicate model name %s; labelled as %r", rec.model_name, name)
        rows.append(ComparisonRow(
            name,
            rec.final_validation["accuracy"],
            rec.final_validation["loss"],
            rec.test_evaluation["accuracy"],
        ))
        if rec.metrics:
            reports[name] = MetricsReport.from_dict(rec.metrics)

    if prior_work is True:
        prior = load_prior_work()
    elif prior_work:
        prior = list(prior_work)
    else:
        prior = []
    return ComparisonTable(rows, prior, reports)


def write_comparison(table: ComparisonTable, output_dir) -> dict:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {"text": output_dir / "comparison.txt", "csv": output_dir / "comparison.csv"}
    paths["text"].write_text(table.to_text(), encoding="utf-8")
    paths["csv"].write_text(table.to_csv(), encoding="utf-8")
    return paths
