"""
Backbone zoo: ImageNet-pretrained feature extractors with a two-class softmax head.

Pretrained weights are the torchvision ImageNet releases. They are looked up
in ``$DERMABENCH_CACHE`` (default ``~/.cache/dermabench``) and downloaded
there only when fetching is explicitly allowed.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import os
import struct
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision import models as tvm

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    WeightsUnavailableError,
)

INPUT_SHAPE = (224, 224, 3)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneId(enum.Enum):
    RESNET101 = "resnet101"
    DENSENET169 = "densenet169"
    EFFICIENTNET = "efficientnet"
    INCEPTIONV3 = "inceptionv3"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    BackboneId.RESNET101: "ResNet101",
    BackboneId.DENSENET169: "DenseNet169",
    BackboneId.EFFICIENTNET: "EfficientNet",
    BackboneId.INCEPTIONV3: "InceptionV3",
}

_ALIASES = {
    "resnet101": BackboneId.RESNET101,
    "resnet-101": BackboneId.RESNET101,
    "densenet169": BackboneId.DENSENET169,
    "densenet-169": BackboneId.DENSENET169,
    "densenet": BackboneId.DENSENET169,
    "efficientnet": BackboneId.EFFICIENTNET,
    "efficientnet_b0": BackboneId.EFFICIENTNET,
    "efficientnetb0": BackboneId.EFFICIENTNET,
    "efficientnet-b0": BackboneId.EFFICIENTNET,
    "inceptionv3": BackboneId.INCEPTIONV3,
    "inception_v3": BackboneId.INCEPTIONV3,
    "inception-v3": BackboneId.INCEPTIONV3,
}

VALID_BACKBONE_NAMES = tuple(b.value for b in BackboneId)


def parse_backbone(name) -> BackboneId:
    if isinstance(name, BackboneId):
        return name
    key = str(name).strip().lower().replace(" ", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise ConfigError(
            f"unknown backbone {name!r}; valid names: {', '.join(VALID_BACKBONE_NAMES)}"
        ) from None


class FreezePolicy(enum.Enum):
    FULL_FINE_TUNE = "full"
    FROZEN_BACKBONE = "frozen"


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

# Each backbone is fed inputs the way its released weights were trained.
# The torchvision Inception v3 weights were converted from TensorFlow and
# expect inputs in [-1, 1]; the other three use ImageNet mean/std.
_PREPROCESSING = {
    BackboneId.RESNET101: {"kind": "mean_std", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    BackboneId.DENSENET169: {"kind": "mean_std", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    BackboneId.EFFICIENTNET: {"kind": "mean_std", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    BackboneId.INCEPTIONV3: {"kind": "mean_std", "mean": (0.5, 0.5, 0.5), "std": (0.5, 0.5, 0.5)},
}


def preprocessing_descriptor(backbone_id: BackboneId) -> dict:
    spec = _PREPROCESSING[parse_backbone(backbone_id)]
    return {"kind": spec["kind"], "mean": list(spec["mean"]), "std": list(spec["std"])}


def preprocess_for_backbone(image: np.ndarray, backbone_id: BackboneId) -> np.ndarray:
    """Normalize a [0, 1] HWC image (or NHWC batch) for ``backbone_id``.

    Per channel this is ``(x - mean) / std``, so an all-zero image maps to
    ``-mean / std``.
    """
    spec = _PREPROCESSING[parse_backbone(backbone_id)]
    mean = np.asarray(spec["mean"], dtype=np.float32)
    std = np.asarray(spec["std"], dtype=np.float32)
    return ((np.asarray(image, dtype=np.float32) - mean) / std).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

_WEIGHTS = {
    BackboneId.RESNET101: tvm.ResNet101_Weights.IMAGENET1K_V1,
    BackboneId.DENSENET169: tvm.DenseNet169_Weights.IMAGENET1K_V1,
    BackboneId.EFFICIENTNET: tvm.EfficientNet_B0_Weights.IMAGENET1K_V1,
    BackboneId.INCEPTIONV3: tvm.Inception_V3_Weights.IMAGENET1K_V1,
}


def cache_dir() -> Path:
    env = os.environ.get("DERMABENCH_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "dermabench"


def weights_filename(backbone_id: BackboneId) -> str:
    return _WEIGHTS[parse_backbone(backbone_id)].url.rsplit("/", 1)[-1]


def find_cached_weights(backbone_id: BackboneId, directory=None) -> Optional[Path]:
    directory = Path(directory) if directory else cache_dir()
    name = weights_filename(backbone_id)
    # plain file, or torch.hub's checkpoints/ layout
    for candidate in (directory / name, directory / "checkpoints" / name):
        if candidate.is_file():
            return candidate
    return None


def load_pretrained_state(backbone_id: BackboneId, allow_download: bool = False, directory=None) -> dict:
    backbone_id = parse_backbone(backbone_id)
    directory = Path(directory) if directory else cache_dir()
    path = find_cached_weights(backbone_id, directory)
    if path is not None:
        return torch.load(path, map_location="cpu", weights_only=True)
    if not allow_download:
        raise WeightsUnavailableError(
            f"pretrained weights for {backbone_id.display_name} not found in {directory} "
            f"(expected {weights_filename(backbone_id)}) and downloading is disabled"
        )
    try:
        return torch.hub.load_state_dict_from_url(
            _WEIGHTS[backbone_id].url, model_dir=str(directory), map_location="cpu", check_hash=True
        )
    except Exception as exc:
        raise WeightsUnavailableError(
            f"could not fetch pretrained weights for {backbone_id.display_name}: {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _feature_extractor(backbone_id: BackboneId, state_dict: Optional[dict]) -> tuple[nn.Module, int]:
    """Build the torchvision network, load weights if given, strip its classifier."""
    if backbone_id is BackboneId.RESNET101:
        net = tvm.resnet101(weights=None)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        body = nn.Sequential(*(m for name, m in net.named_children() if name not in ("avgpool", "fc")))
        return body, net.fc.in_features

    if backbone_id is BackboneId.DENSENET169:
        net = tvm.densenet169(weights=None)
        if state_dict is not None:
            net.load_state_dict(_fix_densenet_keys(state_dict))
        # torchvision applies the final ReLU functionally in DenseNet.forward
        return nn.Sequential(net.features, nn.ReLU(inplace=False)), net.classifier.in_features

    if backbone_id is BackboneId.EFFICIENTNET:
        net = tvm.efficientnet_b0(weights=None)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        return net.features, net.classifier[-1].in_features

    if backbone_id is BackboneId.INCEPTIONV3:
        pretrained = state_dict is not None
        net = tvm.inception_v3(
            weights=None, aux_logits=pretrained, transform_input=False, init_weights=not pretrained
        )
        if pretrained:
            net.load_state_dict(state_dict)
        order = [
            "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
            "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
            "Mixed_5b", "Mixed_5c", "Mixed_5d",
            "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e",
            "Mixed_7a", "Mixed_7b", "Mixed_7c",
        ]  # fmt: skip
        body = nn.Sequential()
        for name in order:
            body.add_module(name, getattr(net, name))
        return body, net.fc.in_features

    raise ConfigError(f"unsupported backbone {backbone_id!r}")


def _fix_densenet_keys(state_dict: dict) -> dict:
    # the released DenseNet files predate torchvision's module renaming
    import re

    pattern = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")
    fixed = {}
    for key, value in state_dict.items():
        m = pattern.match(key)
        fixed[m.group(1) + m.group(2) if m else key] = value
    return fixed


class ClassifierModel(nn.Module):
    """Backbone features -> global average pool -> dense(2) -> softmax.

    ``forward`` takes an already-normalized NHWC batch and returns class
    probabilities; :meth:`predict` takes raw [0, 1] images.
    """

    def __init__(
        self,
        backbone_id: BackboneId,
        features: nn.Module,
        feature_dim: int,
        freeze_policy: FreezePolicy = FreezePolicy.FULL_FINE_TUNE,
        head_seed: int = 0,
        weights_source: str = "imagenet",
    ):
        super().__init__()
        self.backbone_id = backbone_id
        self.freeze_policy = freeze_policy
        self.head_seed = head_seed
        self.weights_source = weights_source
        self.metadata: dict = {}
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(feature_dim, 2)

        # Glorot-uniform kernel and zero bias, drawn from the head seed
        gen = torch.Generator().manual_seed(int(head_seed))
        nn.init.xavier_uniform_(self.head.weight, generator=gen)
        nn.init.zeros_(self.head.bias)

        if freeze_policy is FreezePolicy.FROZEN_BACKBONE:
            for p in self.features.parameters():
                p.requires_grad_(False)
        self.to(memory_format=torch.channels_last)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_policy is FreezePolicy.FROZEN_BACKBONE:
            # frozen batch-norm layers keep their running statistics
            self.features.eval()
        return self

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 3, 1, 2).contiguous(memory_format=torch.channels_last)
        feats = self.pool(self.features(x)).flatten(1)
        return self.head(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        return preprocess_for_backbone(images, self.backbone_id)

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class probabilities for a [0, 1] NHWC batch, computed in inference mode."""
        was_training = self.training
        self.eval()
        try:
            out = []
            for start in range(0, len(images), batch_size):
                x = torch.from_numpy(self.preprocess(images[start : start + batch_size]))
                out.append(self(x).numpy())
        finally:
            self.train(was_training)
        if not out:
            return np.zeros((0, 2), dtype=np.float32)
        return np.concatenate(out)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(
    backbone_id,
    freeze_policy: FreezePolicy = FreezePolicy.FULL_FINE_TUNE,
    *,
    weights: Optional[str] = "imagenet",
    head_seed: int = 0,
    allow_download: bool = False,
    weights_dir=None,
) -> ClassifierModel:
    """Construct a two-class classifier on top of ``backbone_id``.

    ``weights="imagenet"`` loads the pretrained feature extractor (raises
    :class:`WeightsUnavailableError` if it is not cached and
    ``allow_download`` is false). ``weights=None`` gives a randomly
    initialized backbone, seeded by ``head_seed``; checkpoint loading and
    offline smoke tests use this.
    """
    backbone_id = parse_backbone(backbone_id)
    if isinstance(freeze_policy, str):
        freeze_policy = FreezePolicy(freeze_policy)
    if weights not in ("imagenet", None):
        raise ConfigError(f"weights must be 'imagenet' or None, got {weights!r}")

    state = None
    if weights == "imagenet":
        state = load_pretrained_state(backbone_id, allow_download=allow_download, directory=weights_dir)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(head_seed))
        features, dim = _feature_extractor(backbone_id, state)
        return ClassifierModel(
            backbone_id,
            features,
            dim,
            freeze_policy=freeze_policy,
            head_seed=head_seed,
            weights_source="imagenet" if weights else "random",
        )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout: MAGIC (8 bytes) | format version (1 byte) | header length (uint32 BE)
#         | JSON header | torch-serialized state_dict payload
# The header records the payload size and SHA-256 for integrity checking.

CHECKPOINT_MAGIC = b"DRMBCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct(">8sBI")


def config_fingerprint(config: Optional[dict]) -> Optional[str]:
    if config is None:
        return None
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(model: ClassifierModel, path, training_config: Optional[dict] = None) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    payload = buf.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "backbone_id": model.backbone_id.value,
        "head_seed": model.head_seed,
        "freeze_policy": model.freeze_policy.value,
        "weights_source": model.weights_source,
        "preprocessing_descriptor": preprocessing_descriptor(model.backbone_id),
        "training_config_fingerprint": config_fingerprint(training_config),
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "payload_size": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_checkpoint(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a dermabench checkpoint")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    payload = blob[start + header_len :]
    if len(payload) != header["payload_size"]:
        raise CorruptCheckpointError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_size']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def read_checkpoint_header(path) -> dict:
    return _read_checkpoint(path)[0]


def load_checkpoint(path) -> ClassifierModel:
    header, payload = _read_checkpoint(path)
    model = build_model(
        header["backbone_id"],
        FreezePolicy(header["freeze_policy"]),
        weights=None,
        head_seed=header["head_seed"],
    )
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.weights_source = header.get("weights_source", model.weights_source)
    model.metadata = header
    model.eval()
    return model
