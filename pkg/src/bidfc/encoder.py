"""Image encoders ending in global average pooling.

Two presets: a fast 4-stage "small" network for desk-scale runs and a
residual-18-style network (basic blocks, widths d/8..d, default d=512).
GroupNorm is used instead of BatchNorm so the forward pass is a pure
function of (parameters, input) and every state-dict entry is a float
tensor.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError, InputError


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ResidualBlock(nn.Module):
    """3x3 conv + GroupNorm with an identity (or 1x1-projected) skip."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.norm(self.conv(x)) + identity)


class BasicBlock(nn.Module):
    """Two 3x3 convs with a skip connection (residual-18 style)."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + identity)


class FeatureExtractor(nn.Module):
    """Stem + residual stages + GAP; emits (batch, embedding_dim) features."""

    def __init__(self, stem: nn.Module, stages: nn.Module, embedding_dim: int):
        super().__init__()
        self.stem = stem
        self.stages = stages
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embedding_dim = embedding_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise InputError(f"expected (batch, 1, H, W) input, got shape {tuple(x.shape)}")
        return self.pool(self.stages(self.stem(x))).flatten(1)


def small_encoder(embedding_dim: int = 128) -> FeatureExtractor:
    """4-stage single-conv residual network, cheap enough for CPU pretraining."""
    widths = (8, 16, 32, embedding_dim)
    stem = nn.Sequential(
        nn.Conv2d(1, widths[0], 3, stride=2, padding=1, bias=False),
        _norm(widths[0]), nn.ReLU(inplace=True))
    stages = nn.Sequential(
        ResidualBlock(widths[0], widths[0], stride=1),
        ResidualBlock(widths[0], widths[1], stride=2),
        ResidualBlock(widths[1], widths[2], stride=2),
        ResidualBlock(widths[2], widths[3], stride=2))
    return FeatureExtractor(stem, stages, embedding_dim)


def resnet18_encoder(embedding_dim: int = 512) -> FeatureExtractor:
    """Residual-18-style preset: 4 stages of two basic blocks each."""
    if embedding_dim % 8 != 0:
        raise ConfigurationError(f"resnet18 embedding_dim must be divisible by 8, got {embedding_dim}")
    widths = (embedding_dim // 8, embedding_dim // 4, embedding_dim // 2, embedding_dim)
    stem = nn.Sequential(
        nn.Conv2d(1, widths[0], 3, stride=1, padding=1, bias=False),
        _norm(widths[0]), nn.ReLU(inplace=True))
    blocks: list[nn.Module] = []
    cin = widths[0]
    for i, w in enumerate(widths):
        stride = 1 if i == 0 else 2
        blocks.append(BasicBlock(cin, w, stride=stride))
        blocks.append(BasicBlock(w, w, stride=1))
        cin = w
    return FeatureExtractor(stem, nn.Sequential(*blocks), embedding_dim)


ENCODERS = {"small": small_encoder, "resnet18": resnet18_encoder}


def build_encoder(name: str, embedding_dim: int) -> FeatureExtractor:
    if name not in ENCODERS:
        raise ConfigurationError(f"unknown encoder {name!r} (choices: {sorted(ENCODERS)})")
    return ENCODERS[name](embedding_dim)
