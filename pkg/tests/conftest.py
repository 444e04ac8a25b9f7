import io
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from dermabench.modelzoo import BackboneId, ClassifierModel

BLUE = (0, 0, 255)
RED = (255, 0, 0)

_ACCEPTANCE = {}


def png_bytes(color=(128, 128, 128), size=(8, 8)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def make_dataset(root: Path, n_benign: int, n_malignant: int, size=(16, 16), colors=(BLUE, RED)) -> Path:
    """Write a benign/malignant tree of solid-color PNGs."""
    for label, n, color in (("benign", n_benign, colors[0]), ("malignant", n_malignant, colors[1])):
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        blob = png_bytes(color, size)
        for i in range(n):
            (d / f"{label}_{i:05d}.png").write_bytes(blob)
    return root


@pytest.fixture
def toy_dataset(tmp_path):
    return make_dataset(tmp_path / "toy", 10, 10)


def tiny_model(seed: int = 0, backbone=BackboneId.EFFICIENTNET) -> ClassifierModel:
    """A ClassifierModel with a two-layer conv stack; fast enough for loop tests."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        features = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=4, padding=1), nn.BatchNorm2d(8), nn.ReLU(),
            nn.Conv2d(8, 8, 3, stride=2, padding=1), nn.ReLU(),
        )
    return ClassifierModel(backbone, features, 8, head_seed=seed, weights_source="random")


@pytest.fixture
def acceptance():
    """Record an acceptance criterion outcome for the end-of-session summary."""

    def record(number, name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE[number] = (name, passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE, key=lambda k: (int(str(k).split("/")[0]), str(k))):
        name, passed, detail = _ACCEPTANCE[number]
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {name}" + (f" -- {detail}" if detail else ""))
