"""ResNet18-style four-stage encoder for the depth branch."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ShapeError

NUM_LEVELS = 4


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(math.gcd(channels, 8), channels)
    raise ValueError(f"unknown norm {kind!r}")


def pyramid_shapes(batch: int, base_channels: int, h: int, w: int) -> list[tuple[int, int, int, int]]:
    """Expected (B, C, H, W) of every pyramid level."""
    return [(batch, base_channels * 2**i, h // 2 ** (i + 1), w // 2 ** (i + 1)) for i in range(NUM_LEVELS)]


def check_pyramid(levels, batch: int, base_channels: int, h: int, w: int):
    if len(levels) != NUM_LEVELS:
        raise ShapeError(f"pyramid must have {NUM_LEVELS} levels, got {len(levels)}")
    for i, (lvl, want) in enumerate(zip(levels, pyramid_shapes(batch, base_channels, h, w))):
        if tuple(lvl.shape) != want:
            raise ShapeError(f"level {i + 1}: expected {want}, got {tuple(lvl.shape)}")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: str = "batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = make_norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = make_norm(norm, out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                make_norm(norm, out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class CNNBranch(nn.Module):
    """Four stages of two basic blocks each.

    The stem is a stride-2 7x7 convolution without max-pooling, so level 1
    sits at H/2 with ``base_channels`` channels; later stages halve the
    resolution and double the channels.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 24, norm: str = "batch"):
        super().__init__()
        c = base_channels
        self.in_channels = in_channels
        self.base_channels = c
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c, 7, 2, 3, bias=False),
            make_norm(norm, c),
            nn.ReLU(inplace=True),
        )
        stages = [nn.Sequential(BasicBlock(c, c, 1, norm), BasicBlock(c, c, 1, norm))]
        for i in range(1, NUM_LEVELS):
            cin, cout = c * 2 ** (i - 1), c * 2**i
            stages.append(nn.Sequential(BasicBlock(cin, cout, 2, norm), BasicBlock(cout, cout, 1, norm)))
        self.stages = nn.ModuleList(stages)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B,{self.in_channels},H,W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input size {h}x{w} must be divisible by 16")
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


def cnn_forward(depth: torch.Tensor, branch: CNNBranch) -> list[torch.Tensor]:
    return branch(depth)
