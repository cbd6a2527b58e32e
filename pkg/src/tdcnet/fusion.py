"""Dual-branch fusion and attention-gated multi-scale fusion."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

FUSION_MODES = ("mffm", "ffm_stub", "none")


def dual_add(f_cnn: torch.Tensor, f_trans: torch.Tensor) -> torch.Tensor:
    if f_cnn.shape != f_trans.shape:
        raise ShapeError(f"branch features differ in shape: {tuple(f_cnn.shape)} vs {tuple(f_trans.shape)}")
    return f_cnn + f_trans


def channel_shuffle(x: torch.Tensor) -> torch.Tensor:
    """Interleave the two channel halves: (a1..ak, b1..bk) -> (a1, b1, ..., ak, bk)."""
    b, c, h, w = x.shape
    if c % 2:
        raise ShapeError(f"channel_shuffle needs an even channel count, got {c}")
    return x.view(b, 2, c // 2, h, w).transpose(1, 2).reshape(b, c, h, w)


def channel_unshuffle(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    if c % 2:
        raise ShapeError(f"channel_unshuffle needs an even channel count, got {c}")
    return x.view(b, c // 2, 2, h, w).transpose(1, 2).reshape(b, c, h, w)


def align_shallow(f_prev: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Adaptive average pool to ``size`` then duplicate every channel.

    Channel j of the pooled map lands on output channels 2j and 2j+1.
    """
    return F.adaptive_avg_pool2d(f_prev, size).repeat_interleave(2, dim=1)


class SpatialAttention(nn.Module):
    """7x7 conv over [channel-max, channel-mean]; returns raw scores (B,1,H,W)."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        gmp = x.amax(dim=1, keepdim=True)
        gap = x.mean(dim=1, keepdim=True)
        return self.conv(torch.cat([gmp, gap], dim=1))


class ChannelAttention(nn.Module):
    """GAP -> 1x1 conv (ch/r) -> ReLU -> 1x1 conv (ch); returns raw scores (B,ch,1,1)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction ratio {reduction}")
        self.fc1 = nn.Conv2d(channels, channels // reduction, 1)
        self.relu = nn.ReLU()
        self.fc2 = nn.Conv2d(channels // reduction, channels, 1)

    def forward(self, x):
        return self.fc2(self.relu(self.fc1(x.mean(dim=(2, 3), keepdim=True))))


def spatial_attention(x: torch.Tensor, module: SpatialAttention) -> torch.Tensor:
    return module(x)


def channel_attention(x: torch.Tensor, module: ChannelAttention) -> torch.Tensor:
    return module(x)


class MFFM(nn.Module):
    """Blend a level with the previous (shallower) fused level.

    ``f_current`` is (B, ch, h, w); ``f_prev`` is (B, ch/2, 2h, 2w). A
    per-pixel, per-channel gate W comes from a grouped 7x7 conv over the
    interleaved attention scores and features; the output is
    ``proj_high(W*f_current) + proj_low((1-W)*aligned) + X``.
    """

    def __init__(self, channels: int, reduction: int = 4, gate_kernel: int = 7, skip: bool = True):
        super().__init__()
        self.channels = channels
        self.skip = skip
        self.sa = SpatialAttention(7)
        self.ca = ChannelAttention(channels, reduction)
        # One score channel and one feature channel per group after the shuffle.
        self.gate = nn.Conv2d(2 * channels, channels, gate_kernel, padding=gate_kernel // 2, groups=channels)
        self.proj_high = nn.Conv2d(channels, channels, 1)
        self.proj_low = nn.Conv2d(channels, channels, 1)

    def check_shapes(self, f_current, f_prev):
        b, c, h, w = f_current.shape
        if c != self.channels:
            raise ShapeError(f"MFFM built for {self.channels} channels, got {c}")
        if tuple(f_prev.shape) != (b, c // 2, 2 * h, 2 * w):
            raise ShapeError(
                f"previous level must be {(b, c // 2, 2 * h, 2 * w)} for current {tuple(f_current.shape)}, "
                f"got {tuple(f_prev.shape)}"
            )

    def gate_weights(self, x: torch.Tensor) -> torch.Tensor:
        scores = (self.sa(x) + self.ca(x)).expand_as(x)
        return torch.sigmoid(self.gate(channel_shuffle(torch.cat([scores, x], dim=1))))

    def forward(self, f_current: torch.Tensor, f_prev: torch.Tensor) -> torch.Tensor:
        self.check_shapes(f_current, f_prev)
        aligned = align_shallow(f_prev, f_current.shape[-2:])
        x = f_current + aligned
        wgt = self.gate_weights(x)
        out = self.proj_high(wgt * f_current) + self.proj_low((1 - wgt) * aligned)
        return out + x if self.skip else out


class FFMStub(nn.Module):
    """Non-learned fusion: the aligned previous level multiplies the current one."""

    def forward(self, f_current, f_prev):
        b, c, h, w = f_current.shape
        if tuple(f_prev.shape) != (b, c // 2, 2 * h, 2 * w):
            raise ShapeError(f"previous level shape {tuple(f_prev.shape)} does not match {tuple(f_current.shape)}")
        return f_current * align_shallow(f_prev, (h, w))


def mffm(f_current: torch.Tensor, f_prev: torch.Tensor, module: MFFM) -> torch.Tensor:
    return module(f_current, f_prev)


class FusionNeck(nn.Module):
    """Element-wise branch sum at every level, then top-down-into-depth fusion
    of level i with fused level i-1 for i = 2, 3, 4."""

    def __init__(self, base_channels: int, mode: str = "mffm", reduction: int = 4):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {mode!r}")
        self.mode = mode
        if mode == "mffm":
            self.blocks = nn.ModuleList(MFFM(base_channels * 2**i, reduction) for i in range(1, 4))
        elif mode == "ffm_stub":
            self.blocks = nn.ModuleList(FFMStub() for _ in range(1, 4))
        else:
            self.blocks = None

    def forward(self, cnn: list[torch.Tensor], trans: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(cnn) != len(trans):
            raise ShapeError(f"pyramids differ in depth: {len(cnn)} vs {len(trans)}")
        added = [dual_add(a, b) for a, b in zip(cnn, trans)]
        if self.blocks is None:
            return added
        fused = [added[0]]
        for i in range(1, len(added)):
            fused.append(self.blocks[i - 1](added[i], fused[i - 1]))
        return fused


def fuse_pyramid(cnn: list[torch.Tensor], trans: list[torch.Tensor], neck: FusionNeck) -> list[torch.Tensor]:
    return neck(cnn, trans)
