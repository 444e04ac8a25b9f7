import csv
import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermabench import metrics
from dermabench.data import LesionLabel
from dermabench.errors import RenderError, UndefinedMetricError
from dermabench.metrics import (
    ConfusionMatrix,
    accuracy,
    classification_report,
    comparison_table,
    confusion_matrix,
    f1_score,
    precision,
    recall,
)
from dermabench.training import EpochRecord, TrainingHistory

# 10 hand-written pairs (true, predicted); malignant = 1 is positive.
# 3 x (1,1) tp, 1 x (0,1) fp, 2 x (1,0) fn, 4 x (0,0) tn
HAND_PAIRS = [(1, 1), (0, 0), (1, 0), (0, 1), (1, 1), (0, 0), (0, 0), (1, 0), (1, 1), (0, 0)]


def test_hand_fixture_counts():
    cm = confusion_matrix(HAND_PAIRS)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (3, 1, 2, 4)


def test_hand_fixture_metrics():
    cm = confusion_matrix(HAND_PAIRS)
    assert accuracy(cm) == pytest.approx(0.7, abs=1e-12)
    assert precision(cm) == pytest.approx(0.75, abs=1e-12)
    assert recall(cm) == pytest.approx(0.6, abs=1e-12)
    assert f1_score(cm) == pytest.approx(0.6667, abs=1e-4)


def test_hand_fixture_benign_row():
    # benign as positive: tp=4, fp=2, fn=1, tn=3 -> P=2/3, R=4/5, F1=8/11
    report = classification_report([(t, p) for t, p in HAND_PAIRS])
    benign = report.per_class[LesionLabel.BENIGN]
    assert benign.precision == pytest.approx(2 / 3, abs=1e-12)
    assert benign.recall == pytest.approx(4 / 5, abs=1e-12)
    assert benign.f1 == pytest.approx(8 / 11, abs=1e-12)
    assert benign.support == 5
    malignant = report.per_class[LesionLabel.MALIGNANT]
    assert (malignant.precision, malignant.recall) == (pytest.approx(0.75), pytest.approx(0.6))
    assert report.accuracy == pytest.approx(0.7)


def test_perfect_classifier():
    pairs = [(1, 1)] * 3 + [(0, 0)] * 4
    cm = confusion_matrix(pairs)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (3, 0, 0, 4)
    assert accuracy(cm) == precision(cm) == recall(cm) == f1_score(cm) == 1.0
    rendered = metrics.render_report_table({"m": classification_report(pairs)})
    assert rendered.count("1.00") == 6


def test_empty_pairs():
    cm = confusion_matrix([])
    assert cm.total == 0
    for fn in (accuracy, precision, recall, f1_score):
        with pytest.raises(UndefinedMetricError):
            fn(cm)
    with pytest.raises(UndefinedMetricError):
        classification_report([])


@pytest.mark.parametrize("pair", [(2, 0), (0, -1), (0.5, 1)])
def test_index_domain(pair):
    with pytest.raises(ValueError):
        confusion_matrix([pair])


def test_zero_denominators_raise():
    no_positive_pred = ConfusionMatrix(0, 0, 3, 2)
    with pytest.raises(UndefinedMetricError):
        precision(no_positive_pred)
    assert recall(no_positive_pred) == 0.0
    with pytest.raises(UndefinedMetricError):
        f1_score(no_positive_pred)
    no_positives = ConfusionMatrix(0, 2, 0, 3)
    with pytest.raises(UndefinedMetricError):
        recall(no_positives)
    both_zero = ConfusionMatrix(0, 1, 1, 3)
    assert precision(both_zero) == 0.0 and recall(both_zero) == 0.0
    with pytest.raises(UndefinedMetricError):
        f1_score(both_zero)


def test_undefined_cells_render_as_marker():
    # every sample benign, every prediction benign: malignant precision and recall undefined
    report = classification_report([(0, 0)] * 4)
    assert report.per_class[LesionLabel.MALIGNANT].precision is None
    text = metrics.render_report_table({"m": report})
    assert metrics.UNDEFINED in text


def test_swap_mapping():
    cm = ConfusionMatrix(3, 1, 2, 4)
    s = cm.swapped()
    assert (s.tp, s.fp, s.fn, s.tn) == (4, 2, 1, 3)
    assert s.positive_class is LesionLabel.BENIGN
    assert s.swapped() == cm
    assert confusion_matrix(HAND_PAIRS, LesionLabel.BENIGN) == s


def _oracle(truth, pred, pos):
    tp = sum(1 for t, p in zip(truth, pred) if t == pos and p == pos)
    fp = sum(1 for t, p in zip(truth, pred) if t != pos and p == pos)
    fn = sum(1 for t, p in zip(truth, pred) if t == pos and p != pos)
    correct = sum(1 for t, p in zip(truth, pred) if t == p)
    acc = correct / len(truth)
    prec = tp / (tp + fp) if tp + fp else None
    rec = tp / (tp + fn) if tp + fn else None
    f1 = 2 * prec * rec / (prec + rec) if prec is not None and rec is not None and prec + rec else None
    return acc, prec, rec, f1


def _safe(fn, cm):
    try:
        return fn(cm)
    except UndefinedMetricError:
        return None


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_metrics_match_oracle(pairs):
    truth = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    for label in LesionLabel:
        cm = confusion_matrix(pairs, label)
        got = tuple(_safe(fn, cm) for fn in (accuracy, precision, recall, f1_score))
        want = _oracle(truth, pred, label.index)
        for g, w in zip(got, want):
            if w is None:
                assert g is None
            else:
                assert abs(g - w) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_swap_symmetry_and_f1_bounds(pairs):
    report = classification_report(pairs)
    cm = confusion_matrix(pairs)
    assert accuracy(cm) == accuracy(cm.swapped())
    # the swapped matrix's metrics are exactly the benign row
    benign = report.per_class[LesionLabel.BENIGN]
    assert benign.precision == _safe(precision, cm.swapped())
    assert benign.recall == _safe(recall, cm.swapped())
    for row in report.per_class.values():
        if row.f1 is not None:
            lo, hi = sorted((row.precision, row.recall))
            assert lo - 1e-12 <= row.f1 <= hi + 1e-12


@pytest.mark.parametrize("tp,err", [(1, 4), (5, 5), (9, 1)])
def test_f1_equal_precision_recall(tp, err):
    # fp == fn makes precision == recall
    cm = ConfusionMatrix(tp=tp, fp=err, fn=err, tn=5)
    assert precision(cm) == recall(cm)
    assert f1_score(cm) == pytest.approx(precision(cm), abs=1e-15)


def test_report_dict_roundtrip():
    report = classification_report(HAND_PAIRS)
    doc = report.to_dict(model="X")
    assert list(doc) == ["model", "accuracy", "per_class", "confusion"]
    assert list(doc["per_class"]) == ["benign", "malignant"]
    assert doc["confusion"] == {"tp": 3, "fp": 1, "fn": 2, "tn": 4}
    assert metrics.MetricsReport.from_dict(doc) == report


# -- rendering ---------------------------------------------------------------


def _history(n):
    return TrainingHistory([
        EpochRecord(i + 1, 1.0 / (i + 1), 0.5 + i / (4 * n), 1.2 / (i + 1), 0.5 + i / (5 * n)) for i in range(n)
    ])


def test_render_curves_20_epochs(tmp_path):
    paths = metrics.render_curves(_history(20), tmp_path / "densenet", model_name="DenseNet169")
    for key in ("accuracy", "loss", "csv"):
        assert paths[key].exists() and paths[key].stat().st_size > 0
    with open(paths["csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    assert len(rows) == 21


def test_render_curves_single_epoch(tmp_path):
    paths = metrics.render_curves(_history(1), tmp_path / "one")
    assert paths["accuracy"].stat().st_size > 0


def test_render_curves_empty(tmp_path):
    with pytest.raises(RenderError):
        metrics.render_curves(TrainingHistory(), tmp_path / "none")


def test_render_curves_reproducible_from_csv(tmp_path):
    first = metrics.render_curves(_history(7), tmp_path / "a", model_name="M")
    again = metrics.render_curves_from_csv(first["csv"], tmp_path / "b", model_name="M")
    for key in ("accuracy", "loss"):
        assert first[key].read_bytes() == again[key].read_bytes()


def test_render_confusion(tmp_path):
    cm = ConfusionMatrix(3, 1, 2, 4)
    plot = metrics.render_confusion(cm, tmp_path / "cm.png")
    assert plot.path.stat().st_size > 0
    assert plot.class_names == ["malignant", "benign"]
    np.testing.assert_array_equal(plot.annotations, [[3, 2], [1, 4]])


def test_render_confusion_swap_reverses_axes(tmp_path):
    cm = ConfusionMatrix(3, 1, 2, 4)
    a = metrics.render_confusion(cm, tmp_path / "a.png")
    b = metrics.render_confusion(cm.swapped(), tmp_path / "b.png")
    # same (true, predicted) cell keeps its count; only the class order flips
    np.testing.assert_array_equal(b.annotations, a.annotations[::-1, ::-1])
    assert b.class_names == a.class_names[::-1]


def test_render_confusion_empty(tmp_path):
    with pytest.raises(RenderError):
        metrics.render_confusion(ConfusionMatrix(0, 0, 0, 0), tmp_path / "x.png")


# -- comparison ----------------------------------------------------------------


def _record(name, val_acc, val_loss, test_acc, seed=0, report=None):
    return types.SimpleNamespace(
        model_name=name,
        seed=seed,
        final_validation={"accuracy": val_acc, "loss": val_loss},
        test_evaluation={"accuracy": test_acc},
        metrics=report,
    )


def test_single_record_table():
    table = comparison_table([_record("DenseNet169", 0.9, 0.2, 0.91)])
    assert len(table.rows) == 1
    text = table.to_text()
    assert "0.9000" in text and "0.2000" in text and "0.9100" in text


def test_values_are_copied_not_rounded():
    table = comparison_table([_record("A", 0.123456789, 0.5, 0.7)])
    assert table.rows[0].val_accuracy == 0.123456789


def test_duplicate_names_disambiguated(caplog):
    table = comparison_table([_record("ResNet101", 0.9, 0.1, 0.9, seed=1), _record("ResNet101", 0.8, 0.2, 0.8, seed=2)])
    assert [r.model for r in table.rows] == ["ResNet101 (seed 1)", "ResNet101 (seed 2)"]
    assert "duplicate" in caplog.text


def test_prior_work_fixture():
    rows = metrics.load_prior_work()
    assert len(rows) == 13
    assert {r.reference for r in rows} == {f"In study [{i}]" for i in range(13, 18)}
    table = comparison_table([_record("A", 0.9, 0.1, 0.9)], prior_work=True)
    text = table.to_text()
    assert "not recomputed" in text
    assert "Xception" in text and "0.952" in text
    assert "literature: In study [17]" in table.to_csv()


def test_comparison_needs_records():
    with pytest.raises(ValueError):
        comparison_table([])
