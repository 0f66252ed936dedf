"""Classifier backbones with a configurable number of input channels."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

VARIANTS = ("desk_tiny", "B0", "B1", "B2", "B3")
DESK_WIDTHS = (16, 32, 64)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    input_channels: int = 3
    num_classes: int = 10
    variant: str = "B2"
    dropout: float = 0.3

    def __post_init__(self):
        if self.input_channels < 1:
            raise ModelError("input_channels must be >= 1")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ModelError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ModelError(f"unsupported variant {self.variant!r}; expected one of {VARIANTS}")


def _conv_bn_relu(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]


class DeskTiny(nn.Module):
    """Three conv-BN-ReLU stages, global average pooling and a linear head."""

    def __init__(self, in_channels: int, num_classes: int, dropout: float = 0.0):
        super().__init__()
        w1, w2, w3 = DESK_WIDTHS
        self.features = nn.Sequential(
            *_conv_bn_relu(in_channels, w1, 1),
            *_conv_bn_relu(w1, w2, 2),
            *_conv_bn_relu(w2, w3, 2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(w3, num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def stem(self) -> nn.Conv2d:
        return self.features[0]

    def forward(self, x):
        x = self.pool(self.features(x)).flatten(1)
        return self.classifier(self.dropout(x))


def desk_tiny_parameter_count(in_channels: int, num_classes: int) -> int:
    w1, w2, w3 = DESK_WIDTHS
    convs = 9 * (in_channels * w1 + w1 * w2 + w2 * w3)
    bn = 2 * (w1 + w2 + w3)
    return convs + bn + w3 * num_classes + num_classes


def _efficientnet(cfg: ClassifierConfig) -> nn.Module:
    from torchvision import models

    ctor = {"B0": models.efficientnet_b0, "B1": models.efficientnet_b1,
            "B2": models.efficientnet_b2, "B3": models.efficientnet_b3}[cfg.variant]
    net = ctor(weights=None, num_classes=cfg.num_classes, dropout=cfg.dropout)
    stem: nn.Conv2d = net.features[0][0]
    if cfg.input_channels != stem.in_channels:
        wide = nn.Conv2d(cfg.input_channels, stem.out_channels, stem.kernel_size, stride=stem.stride,
                         padding=stem.padding, bias=False)
        # same initializer torchvision uses for every conv
        nn.init.kaiming_normal_(wide.weight, mode="fan_out")
        net.features[0][0] = wide
    return net


class Classifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig, net: nn.Module):
        super().__init__()
        self.config = cfg
        self.net = net

    @property
    def stem(self) -> nn.Conv2d:
        if isinstance(self.net, DeskTiny):
            return self.net.stem
        return self.net.features[0][0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ModelError(f"expected [B, {self.config.input_channels}, H, W] input, got {tuple(x.shape)}")
        return self.net(x)


def build_classifier(cfg: ClassifierConfig, seed: int = 0) -> Classifier:
    """Build a freshly initialized classifier; (cfg, seed) fixes every weight."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if cfg.variant == "desk_tiny":
            net = DeskTiny(cfg.input_channels, cfg.num_classes, cfg.dropout)
        else:
            net = _efficientnet(cfg)
    return Classifier(cfg, net)


def forward(model: Classifier, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Classifier, optimizer=None, step: int = 0, manifest_hash: str = "",
                    extra: dict | None = None) -> None:
    """Write a self-describing checkpoint atomically (temp file + rename)."""
    path = Path(path)
    payload = {
        "format": "msmatch-checkpoint/1",
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "manifest_hash": manifest_hash,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> tuple[Classifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_classifier(ClassifierConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
