import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from dermabench import metrics
from dermabench.data import AugmentationConfig, BatchStream, Split, scan_dataset, split_manifest
from dermabench.errors import ConfigError, DivergenceError, EvaluationError
from dermabench.modelzoo import read_checkpoint_header
from dermabench.training import (
    EVALUATION_NOTE,
    RunRecord,
    TrainConfig,
    evaluate,
    load_run_record,
    run_experiment,
    train,
)

from conftest import make_dataset, tiny_model


class ConstantModel:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def predict(self, images):
        return np.tile(self.probs, (len(images), 1))


def _one_hot(indices):
    return np.eye(2, dtype=np.float32)[indices]


def _solid_batches(n_per_class, size=32, batch_size=64):
    images = np.zeros((2 * n_per_class, size, size, 3), np.float32)
    images[:n_per_class, ..., 2] = 1.0  # blue benign
    images[n_per_class:, ..., 0] = 1.0  # red malignant
    labels = _one_hot([0] * n_per_class + [1] * n_per_class)
    return [(images[i : i + batch_size], labels[i : i + batch_size]) for i in range(0, len(images), batch_size)]


def test_default_training_recipe():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size) == (0.0001, 20, 64)
    assert cfg.optimizer == "adam" and cfg.loss == "categorical_crossentropy"


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"epochs": -1}, {"batch_size": 0}, {"optimizer": "sgd"}, {"micro_batch_size": 0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# -- evaluate ----------------------------------------------------------------


def test_evaluate_constant_benign_model():
    stream = [(np.zeros((5, 4, 4, 3)), _one_hot([0, 0, 0, 1, 1]))]
    result = evaluate(ConstantModel([1.0, 0.0]), stream)
    assert result.accuracy == 0.6
    assert [s[1] for s in result.per_sample] == [0] * 5


def test_evaluate_tie_breaks_low():
    result = evaluate(ConstantModel([0.5, 0.5]), [(np.zeros((1, 2, 2, 3)), _one_hot([1]))])
    assert result.per_sample[0][1] == 0
    assert result.loss == pytest.approx(np.log(2))


def test_evaluate_perfect_model_loss_vanishes():
    stream = [(np.zeros((2, 2, 2, 3)), _one_hot([1, 1]))]
    losses = []
    for conf in (0.9, 0.99, 0.9999):
        r = evaluate(ConstantModel([1 - conf, conf]), stream)
        assert r.accuracy == 1.0
        losses.append(r.loss)
    assert losses[0] > losses[1] > losses[2] > 0
    assert losses[2] == pytest.approx(-np.log(0.9999), rel=1e-4)


def test_evaluate_empty_stream():
    with pytest.raises(EvaluationError):
        evaluate(ConstantModel([1, 0]), [])


def test_evaluate_accepts_index_labels_and_keeps_order():
    class Echo:
        def predict(self, images):
            p = images[:, 0, 0, 0]
            return np.stack([1 - p, p], axis=1)

    x = np.zeros((4, 1, 1, 3), np.float32)
    x[:, 0, 0, 0] = [0.9, 0.1, 0.6, 0.3]
    result = evaluate(Echo(), [(x[:2], np.array([1, 0])), (x[2:], np.array([1, 1]))])
    assert [(t, p) for t, p, _ in result.per_sample] == [(1, 1), (0, 0), (1, 1), (1, 0)]
    assert result.accuracy == 0.75


def test_evaluate_accuracy_matches_confusion_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 40))
        probs = rng.dirichlet([1, 1], size=n)

        class Fixed:
            def __init__(self):
                self.i = 0

            def predict(self, images):
                out = probs[self.i : self.i + len(images)]
                self.i += len(images)
                return out

        labels = _one_hot(rng.integers(0, 2, n))
        result = evaluate(Fixed(), [(np.zeros((n, 1, 1, 3)), labels)])
        cm = metrics.confusion_matrix([(t, p) for t, p, _ in result.per_sample])
        assert result.accuracy == metrics.accuracy(cm)


# -- train ---------------------------------------------------------------------


def test_zero_epochs_leave_model_untouched():
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model, history = train(model, _solid_batches(4), _solid_batches(4), TrainConfig(epochs=0))
    assert len(history) == 0
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_empty_train_stream():
    with pytest.raises(ConfigError):
        train(tiny_model(), [], _solid_batches(2), TrainConfig(epochs=1))


def test_tiny_model_overfits_separable_set():
    batches = _solid_batches(16)
    model, history = train(tiny_model(), batches, batches, TrainConfig(learning_rate=1e-2, epochs=20))
    assert len(history) == 20
    assert max(history.column("train_accuracy")) >= 0.95
    assert history.records[-1].train_loss < 0.5 * history.records[0].train_loss
    for r in history.records:
        assert 0 <= r.train_accuracy <= 1 and 0 <= r.val_accuracy <= 1
        assert r.train_loss >= 0 and r.val_loss >= 0
        assert r.val_samples == 32


def test_micro_batches_match_full_batch_gradients_without_bn():
    # without batch norm, accumulating chunks gives the same step as one pass
    from torch import nn

    from dermabench.modelzoo import BackboneId, ClassifierModel

    def model():
        torch.manual_seed(0)
        feats = nn.Sequential(nn.Conv2d(3, 4, 3, stride=4), nn.ReLU())
        return ClassifierModel(BackboneId.EFFICIENTNET, feats, 4, head_seed=0)

    rng = np.random.default_rng(1)
    x = rng.random((8, 16, 16, 3), dtype=np.float32)
    batches = [(x, _one_hot(rng.integers(0, 2, 8)))]
    a, _ = train(model(), batches, batches, TrainConfig(epochs=2))
    b, _ = train(model(), batches, batches, TrainConfig(epochs=2, micro_batch_size=3))
    for (k, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        torch.testing.assert_close(p, q, rtol=1e-5, atol=1e-6, msg=k)


def test_divergence_aborts_with_location():
    model = tiny_model()
    original = model.logits
    calls = {"n": 0}

    def poisoned(x):
        out = original(x)
        if not model.training:
            return out
        calls["n"] += 1
        return out * float("nan") if calls["n"] == 3 else out

    model.logits = poisoned
    batches = _solid_batches(4, batch_size=4)  # two batches per epoch
    with pytest.raises(DivergenceError) as info:
        train(model, batches, batches, TrainConfig(epochs=3))
    assert (info.value.epoch, info.value.batch) == (2, 1)


def test_training_is_seeded():
    batches = _solid_batches(4)
    _, h1 = train(tiny_model(), batches, batches, TrainConfig(epochs=3, seed=5))
    _, h2 = train(tiny_model(), batches, batches, TrainConfig(epochs=3, seed=5))
    assert h1.column("train_loss") == h2.column("train_loss")


# -- run_experiment ------------------------------------------------------------


@pytest.fixture
def split(tmp_path):
    root = make_dataset(tmp_path / "ds", 8, 8)
    return split_manifest(scan_dataset(root), 0.75, 0)


def _run(split, out, seed=0, epochs=2, **kw):
    return run_experiment(
        split,
        "efficientnet",
        TrainConfig(epochs=epochs, batch_size=8, learning_rate=1e-2, seed=seed),
        AugmentationConfig(),
        out,
        model=tiny_model(seed),
        **kw,
    )


def test_run_experiment_outputs(split, tmp_path):
    out = tmp_path / "out"
    record = _run(split, out)
    runs = list((out / "runs").glob("run-efficientnet-0-*.json"))
    assert len(runs) == 1
    again = load_run_record(runs[0])
    assert again.to_dict() == record.to_dict()
    assert record.train_config["learning_rate"] == 1e-2
    assert record.evaluation_note == EVALUATION_NOTE
    assert record.manifest_fingerprint == split.fingerprint()

    last = record.history.records[-1]
    assert abs(record.final_validation["accuracy"] - last.val_accuracy) <= 1e-9
    assert abs(record.final_validation["loss"] - last.val_loss) <= 1e-9
    assert record.final_validation["samples"] == 4

    csv_path = runs[0].with_name(runs[0].stem + "-history.csv")
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    assert len(rows) == 3

    header = read_checkpoint_header(record.checkpoint_path)
    assert header["backbone_id"] == "efficientnet"

    metrics_files = list((out / "reports").glob("metrics-*.json"))
    doc = json.loads(metrics_files[0].read_text())
    assert set(doc) == {"model", "accuracy", "per_class", "confusion"}
    assert doc["accuracy"] == record.test_evaluation["accuracy"]


def test_run_experiment_zero_epochs(split, tmp_path):
    record = _run(split, tmp_path / "out", epochs=0)
    assert len(record.history) == 0
    assert record.final_validation == record.test_evaluation


def test_run_experiment_deterministic(split, tmp_path):
    a = _run(split, tmp_path / "a", seed=3, deterministic=True)
    b = _run(split, tmp_path / "b", seed=3, deterministic=True)
    assert a.final_validation["accuracy"] == b.final_validation["accuracy"]
    assert a.history.column("train_loss") == b.history.column("train_loss")
    assert not torch.are_deterministic_algorithms_enabled()


def test_run_experiment_unwritable_output(split, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with pytest.raises(OSError):
        run_experiment(split, "efficientnet", TrainConfig(epochs=1), None, blocker / "out", model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_run_experiment_cleans_up_on_failure(split, tmp_path):
    model = tiny_model()
    model.logits = lambda x: torch.full((len(x), 2), float("nan"), requires_grad=True)
    out = tmp_path / "out"
    with pytest.raises(DivergenceError):
        run_experiment(split, "efficientnet", TrainConfig(epochs=1, batch_size=4), None, out, model=model)
    leftovers = [p for p in out.rglob("*") if p.is_file()]
    assert leftovers == []


def test_run_experiment_needs_split_manifest(tmp_path):
    root = make_dataset(tmp_path / "ds", 2, 2)
    with pytest.raises(ConfigError):
        run_experiment(scan_dataset(root), "efficientnet", TrainConfig(epochs=1), None, tmp_path / "o", model=tiny_model())


def test_run_record_json_roundtrip(split, tmp_path):
    record = _run(split, tmp_path / "out", epochs=1)
    clone = RunRecord.from_dict(json.loads(record.to_json()))
    assert clone.history.records == record.history.records
