"""BMI regression model: DenseNet backbone with channel attention.

Squeeze-and-Excitation blocks sit after each transition layer of the DenseNet
feature extractor: global average pooling compresses spatial information,
two 1x1 convolutions with a bottleneck in between compute per-channel weights,
and a sigmoid gate rescales the feature map. The regression head is a global
average pool followed by a single linear output.

A small `tiny` backbone with the same SE wiring exists for tests and for the
committed inference-parity fixtures; real training uses densenet121/201.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

BACKBONES = ("densenet121", "densenet201", "tiny")


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "densenet201"
    se_reduction: int = 16
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be a positive integer")


class SqueezeExcite(nn.Module):
    """Channel-attention gate. Output shape always equals input shape.

    With `force_identity` set the gate is bypassed entirely, which recovers
    the SE-free backbone; tests use this as the ablation oracle.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, hidden, kernel_size=1)
        self.expand = nn.Conv2d(hidden, channels, kernel_size=1)
        self.force_identity = False

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        w = self.squeeze(x)
        w = F.relu(self.reduce(w))
        return torch.sigmoid(self.expand(w))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return x
        return x * self.gate(x)


def _densenet_features(spec: ModelSpec) -> tuple[nn.Sequential, int]:
    import torchvision.models as tvm

    builders = {"densenet121": tvm.densenet121, "densenet201": tvm.densenet201}
    weights = "DEFAULT" if spec.pretrained else None
    base = builders[spec.backbone](weights=weights)

    modules: OrderedDict[str, nn.Module] = OrderedDict()
    for name, module in base.features.named_children():
        modules[name] = module
        if name.startswith("transition"):
            channels = module.conv.out_channels
            modules[f"se{name[len('transition'):]}"] = SqueezeExcite(channels, spec.se_reduction)
    return nn.Sequential(modules), base.classifier.in_features


def _tiny_features(spec: ModelSpec) -> tuple[nn.Sequential, int]:
    modules: OrderedDict[str, nn.Module] = OrderedDict([
        ("conv0", nn.Conv2d(3, 8, kernel_size=3, stride=2, padding=1)),
        ("norm0", nn.BatchNorm2d(8)),
        ("relu0", nn.ReLU(inplace=True)),
        ("pool0", nn.MaxPool2d(2)),
        ("denseblock1", nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)),
        ("se1", SqueezeExcite(16, spec.se_reduction)),
        ("denseblock2", nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)),
        ("se2", SqueezeExcite(32, spec.se_reduction)),
    ])
    return nn.Sequential(modules), 32


class BmiRegressor(nn.Module):
    """Feature extractor (with SE gates) plus a single-output regression head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        if spec.backbone == "tiny":
            self.features, num_features = _tiny_features(spec)
        else:
            self.features, num_features = _densenet_features(spec)
        self.num_features = num_features
        self.head = nn.Linear(num_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.features(x)
        out = F.relu(out)
        out = F.adaptive_avg_pool2d(out, (1, 1)).flatten(1)
        return self.head(out)

    def forward_without_se(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass that skips the SE modules: the ungated backbone."""
        out = x
        for module in self.features:
            if isinstance(module, SqueezeExcite):
                continue
            out = module(out)
        out = F.relu(out)
        out = F.adaptive_avg_pool2d(out, (1, 1)).flatten(1)
        return self.head(out)

    def se_modules(self) -> list[SqueezeExcite]:
        return [m for m in self.features.modules() if isinstance(m, SqueezeExcite)]

    def set_se_identity(self, value: bool) -> None:
        for m in self.se_modules():
            m.force_identity = value


def build_model(spec: ModelSpec | None = None) -> BmiRegressor:
    return BmiRegressor(spec or ModelSpec())
