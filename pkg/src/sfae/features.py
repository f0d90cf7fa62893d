"""Frozen ResNet18 feature extraction with multi-scale bilinear fusion.

``layer0`` is the stem (conv1, bn1, relu, maxpool); ``layer1``..``layer3``
are the first three residual stages.  Selected maps are resized to the
spatial size of the largest selected map and concatenated in layer order.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .exceptions import BackboneInitError, ContractError

logger = logging.getLogger(__name__)

__all__ = [
    "LayerSelection",
    "FeatureStack",
    "Backbone",
    "build_backbone",
    "extract",
    "output_geometry",
    "WEIGHTS_ENV",
]

WEIGHTS_ENV = "SFAE_WEIGHTS_DIR"
RESNET18_WEIGHTS_FILE = "resnet18-f37072fd.pth"

# (channels, total stride) of each selectable stage of ResNet18
_LAYER_GEOMETRY = {0: (64, 4), 1: (64, 4), 2: (128, 8), 3: (256, 16)}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class LayerSelection(tuple):
    """Sorted, nonempty subset of {0, 1, 2, 3}."""

    def __new__(cls, layer_ids: Sequence[int] = (0, 1, 2)):
        ids = sorted({int(i) for i in layer_ids})
        if not ids:
            raise ContractError("layer selection must be nonempty")
        bad = [i for i in ids if i not in _LAYER_GEOMETRY]
        if bad:
            raise ContractError(f"layer ids must be in 0..3, got {bad}")
        return super().__new__(cls, ids)

    @property
    def name(self) -> str:
        return "layer" + ",".join(str(i) for i in self)


@dataclass
class FeatureStack:
    features: torch.Tensor
    layer_boundaries: tuple[int, ...]
    selection: LayerSelection

    @property
    def shape(self):
        return tuple(self.features.shape)


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _stage_size(layer: int, input_size: int) -> int:
    s = _conv_out(input_size, 7, 2, 3)  # conv1
    s = _conv_out(s, 3, 2, 1)  # maxpool
    for _ in range(max(0, layer - 1)):
        s = _conv_out(s, 3, 2, 1)  # strided 3x3 in layers 2 and 3
    return s


def output_geometry(selection: Sequence[int], input_size: int) -> tuple[int, int, int]:
    """Fused (C, H, W) for a layer selection, without running the backbone."""
    selection = LayerSelection(selection)
    channels = sum(_LAYER_GEOMETRY[i][0] for i in selection)
    size = max(_stage_size(i, input_size) for i in selection)
    return channels, size, size


class Backbone(nn.Module):
    """ResNet18 truncated after the deepest selectable stage, frozen."""

    def __init__(self, resnet: torchvision.models.ResNet):
        super().__init__()
        self.stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool)
        self.layer1 = resnet.layer1
        self.layer2 = resnet.layer2
        self.layer3 = resnet.layer3
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # batch statistics are never updated
        return super().train(False)

    def forward(self, images: torch.Tensor, selection: Sequence[int]) -> dict[int, torch.Tensor]:
        x = images.expand(-1, 3, -1, -1) if images.shape[1] == 1 else images
        x = (x - self.mean) / self.std
        deepest = max(selection)
        out = {}
        x = self.stem(x)
        out[0] = x
        for i, stage in enumerate((self.layer1, self.layer2, self.layer3), start=1):
            if i > deepest:
                break
            x = stage(x)
            out[i] = x
        return {i: out[i] for i in selection}


def _weights_path(weights_path: str | os.PathLike | None) -> Path:
    if weights_path is not None:
        return Path(weights_path)
    cache = os.environ.get(WEIGHTS_ENV)
    if cache:
        return Path(cache) / RESNET18_WEIGHTS_FILE
    return Path(torch.hub.get_dir()) / "checkpoints" / RESNET18_WEIGHTS_FILE


def build_backbone(
    pretrained: bool = True,
    weights_path: str | os.PathLike | None = None,
    seed: int = 0,
) -> Backbone:
    """Build the frozen backbone.

    With ``pretrained=True`` ImageNet weights are read from ``weights_path``,
    ``$SFAE_WEIGHTS_DIR/resnet18-f37072fd.pth`` or the torch hub cache, in
    that order; nothing is downloaded.  ``pretrained=False`` gives a randomly
    initialized network, deterministic in ``seed`` (for offline testing).
    """
    if pretrained:
        path = _weights_path(weights_path)
        if not path.is_file():
            raise BackboneInitError(
                f"ResNet18 weights not found at {path}; set {WEIGHTS_ENV} or pass "
                "pretrained=False for a seeded random backbone"
            )
        resnet = torchvision.models.resnet18(weights=None)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            resnet.load_state_dict(state)
        except Exception as exc:  # corrupt or mismatched file
            raise BackboneInitError(f"could not load weights from {path}: {exc}") from exc
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            resnet = torchvision.models.resnet18(weights=None)
    return Backbone(resnet)


def fuse(maps: dict[int, torch.Tensor]) -> tuple[torch.Tensor, tuple[int, ...]]:
    layers = sorted(maps)
    target = max((maps[i].shape[-2:] for i in layers), key=lambda s: s[0] * s[1])
    parts, bounds, offset = [], [], 0
    for i in layers:
        m = maps[i]
        if m.shape[-2:] != target:
            m = F.interpolate(m, size=tuple(target), mode="bilinear", align_corners=False)
        parts.append(m)
        bounds.append(offset)
        offset += m.shape[1]
    feats = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
    return feats, tuple(bounds)


@torch.no_grad()
def extract(images, selection: Sequence[int], backbone: Backbone) -> FeatureStack:
    """Lift a batch of [0, 1] images (N x 1 x H x W) into the fused feature space."""
    selection = LayerSelection(selection)
    x = torch.as_tensor(getattr(images, "images", images), dtype=torch.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] not in (1, 3):
        raise ContractError(f"expected N x 1 x H x W images, got {tuple(x.shape)}")
    if x.numel() and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
        raise ContractError("images must lie in [0, 1]")
    maps = backbone(x, selection)
    feats, bounds = fuse(maps)
    return FeatureStack(feats, bounds, selection)


def selection_from_name(name: str) -> LayerSelection:
    return LayerSelection(int(c) for c in name.removeprefix("layer").split(",") if c)


def parse_selection(value) -> LayerSelection:
    if isinstance(value, str):
        return selection_from_name(value)
    return LayerSelection(np.atleast_1d(value).tolist())


class Extractor:
    """Callable bundle of a frozen backbone and a layer selection."""

    def __init__(self, selection: Sequence[int] = (0, 1, 2), pretrained: bool = True,
                 weights_path=None, seed: int = 0, backbone: Backbone | None = None,
                 batch_size: int = 64):
        self.selection = LayerSelection(selection)
        self.backbone = backbone or build_backbone(pretrained, weights_path, seed)
        self.batch_size = batch_size

    def __call__(self, images) -> FeatureStack:
        x = torch.as_tensor(getattr(images, "images", images), dtype=torch.float32)
        if len(x) <= self.batch_size:
            return extract(x, self.selection, self.backbone)
        parts = [extract(x[i:i + self.batch_size], self.selection, self.backbone)
                 for i in range(0, len(x), self.batch_size)]
        return FeatureStack(torch.cat([p.features for p in parts]), parts[0].layer_boundaries,
                            self.selection)

    def geometry(self, input_size: int) -> tuple[int, int, int]:
        return output_geometry(self.selection, input_size)
