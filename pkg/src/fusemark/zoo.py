"""Classifier architectures, evaluation and model files.

Layer tables (all models take raw 0-255 pixels, NCHW float; the first stage
divides by 255 and applies the dataset's channel mean/std):

LeNet-5 (28x28x1 or 32x32x3 input)
    conv 5x5 -> 6 (pad 2 on 28x28) . ReLU . maxpool 2
    conv 5x5 -> 16 . ReLU . maxpool 2
    fc 16*5*5 -> 120 . ReLU . fc 120 -> 84 . ReLU . fc 84 -> classes

ResNet-18
    CIFAR stem (conv 3x3 -> 64, BN, ReLU, no max-pool), four stages of two
    BasicBlocks (64, 128, 256, 512; stride 1, 2, 2, 2), global avg-pool, fc.

VGG16 (with batch norm)
    13 conv 3x3 layers in the 64-64-M-128-128-M-256x3-M-512x3-M-512x3-M
    layout, global avg-pool, fc 512 -> classes.
"""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fusemark.data import ImageSet, dataset_info

MODEL_FORMAT_VERSION = "1.0"
ARCHS = ("lenet5", "resnet18", "vgg16")


class ArchMismatchError(ValueError):
    """Architecture spec does not fit the dataset it is bound to."""


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    num_classes: int
    input_shape: tuple[int, int, int]  # (H, W, C)

    @classmethod
    def for_dataset(cls, arch_id: str, dataset_id: str, num_classes: int | None = None) -> "ArchSpec":
        info = dataset_info(dataset_id)
        return cls(arch_id, num_classes or info.num_classes, info.shape)


class InputNorm(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x / 255.0 - self.mean) / self.std


class LeNet5(nn.Module):
    def __init__(self, num_classes=10, in_channels=1, size=28):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 6, 5, padding=2 if size == 28 else 0)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    def __init__(self, num_classes=10, in_channels=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        layers, cin = [], 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers.append(nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)))
            cin = cout
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.fc = nn.Linear(512, num_classes)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


_VGG16 = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


class VGG16(nn.Module):
    def __init__(self, num_classes=100, in_channels=3):
        super().__init__()
        layers, cin = [], in_channels
        for v in _VGG16:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                cin = v
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(512, num_classes)

    def forward(self, x):
        x = F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)
        return self.fc(x)


class Classifier(nn.Module):
    """Input normalisation followed by the backbone; carries its ArchSpec."""

    def __init__(self, spec: ArchSpec, backbone: nn.Module, mean, std):
        super().__init__()
        self.spec = spec
        self.norm = InputNorm(mean, std)
        self.net = backbone

    def forward(self, x):
        return self.net(self.norm(x))


def build_model(spec: ArchSpec, seed: int = 0, dataset_id: str | None = None) -> Classifier:
    if spec.arch_id not in ARCHS:
        raise ValueError(f"unknown arch_id {spec.arch_id!r}; known: {ARCHS}")
    if spec.num_classes < 2:
        raise ArchMismatchError("num_classes must be >= 2")
    h, w, c = spec.input_shape
    if dataset_id is not None:
        info = dataset_info(dataset_id)
        if spec.num_classes != info.num_classes or tuple(spec.input_shape) != info.shape:
            raise ArchMismatchError(
                f"{spec.arch_id} with {spec.num_classes} classes / input {spec.input_shape} does not "
                f"match {dataset_id} ({info.num_classes} classes, {info.shape})")
        mean, std = info.mean, info.std
    else:
        mean, std = (0.5,) * c, (0.25,) * c
    if spec.arch_id == "lenet5" and (h, w) not in ((28, 28), (32, 32)):
        raise ArchMismatchError("lenet5 expects 28x28 or 32x32 inputs")
    torch.manual_seed(seed)
    if spec.arch_id == "lenet5":
        backbone = LeNet5(spec.num_classes, c, h)
    elif spec.arch_id == "resnet18":
        backbone = ResNet18(spec.num_classes, c)
    else:
        backbone = VGG16(spec.num_classes, c)
    return Classifier(spec, backbone, mean, std)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) uint8 -> (N, C, H, W) float32 of raw pixel values."""
    return torch.from_numpy(np.array(images, copy=True)).permute(0, 3, 1, 2).float()


@torch.no_grad()
def predict(model: nn.Module, images: np.ndarray, batch_size: int = 1000, return_scores: bool = False):
    """Inference-mode predictions; training mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        preds, scores = [], []
        for i in range(0, len(images), batch_size):
            logits = model(to_tensor(images[i:i + batch_size]))
            preds.append(logits.argmax(1).numpy())
            if return_scores:
                scores.append(torch.softmax(logits, 1).numpy())
    finally:
        model.train(was_training)
    out = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    if return_scores:
        return out, (np.concatenate(scores) if scores else np.empty((0, 0)))
    return out


def evaluate(model: nn.Module, split: ImageSet, batch_size: int = 1000) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float((predict(model, split.images, batch_size) == split.labels).mean())


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def clone(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


def save_model(model: Classifier, path: str | Path, manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": MODEL_FORMAT_VERSION, **asdict(model.spec)}
    buf = io.BytesIO()
    torch.save({"header": header, "manifest": manifest or {}, "state_dict": model.state_dict()}, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_model(path: str | Path, with_manifest: bool = False):
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    header = blob["header"]
    if int(str(header["format_version"]).split(".")[0]) > int(MODEL_FORMAT_VERSION.split(".")[0]):
        raise ValueError(f"{path}: model format {header['format_version']} is newer than supported")
    spec = ArchSpec(header["arch_id"], header["num_classes"], tuple(header["input_shape"]))
    model = build_model(spec)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return (model, blob.get("manifest", {})) if with_manifest else model
