"""Shifted-window attention encoder for the RGB-D branch.

Shapes are aligned with :class:`tdcnet.cnn_branch.CNNBranch`: a stride-2
patch embedding lands at H/2 with C channels and every later stage starts
with 2x2 patch merging.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .cnn_branch import NUM_LEVELS
from .errors import ConfigError, ShapeError


@dataclass
class WindowAttnConfig:
    window: int = 5
    heads_per_stage: tuple[int, int, int, int] = (1, 2, 4, 8)
    depths_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    mlp_ratio: float = 4.0

    def validate(self, base_channels: int, h: int | None = None, w: int | None = None):
        if len(self.heads_per_stage) != NUM_LEVELS or len(self.depths_per_stage) != NUM_LEVELS:
            raise ConfigError("heads_per_stage and depths_per_stage need one entry per stage")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        for i, heads in enumerate(self.heads_per_stage):
            ch = base_channels * 2**i
            if heads < 1 or ch % heads:
                raise ConfigError(f"stage {i + 1}: {ch} channels not divisible by {heads} heads")
        if h is not None and w is not None:
            check_window_tiling(h, w, self.window)
        return self


def check_window_tiling(h: int, w: int, window: int):
    if h % 16 or w % 16:
        raise ConfigError(f"input size {h}x{w} must be divisible by 16")
    for i in range(NUM_LEVELS):
        sh, sw = h // 2 ** (i + 1), w // 2 ** (i + 1)
        if sh % window or sw % window:
            raise ConfigError(f"window {window} does not tile stage {i + 1} ({sh}x{sw})")


def auto_window(h: int, w: int, max_window: int = 7) -> int:
    """Largest window <= ``max_window`` that tiles every stage."""
    h4, w4 = h // 16, w // 16
    for ws in range(max_window, 0, -1):
        if h4 % ws == 0 and w4 % ws == 0:
            return ws
    return 1


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws*ws, C)"""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, w, c)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    return (rel[..., 0] + ws - 1) * (2 * ws - 1) + (rel[..., 1] + ws - 1)


def shifted_window_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    """(nW, N, N) additive mask: 0 inside a region, -inf across regions.

    After a cyclic roll by ``-shift``, the last window row/column mixes
    pixels that were not adjacent in the original map; they get separate
    region labels.
    """
    labels = torch.zeros(1, h, w, 1)
    cnt = 0
    spans = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for hs in spans:
        for wsl in spans:
            labels[:, hs, wsl, :] = cnt
            cnt += 1
    lw = window_partition(labels, ws).squeeze(-1)
    diff = lw[:, None, :] - lw[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with relative position bias.

    Set ``record_attention`` to keep the last softmax weights in
    ``last_attention`` (shape (B*nW, heads, N, N)).
    """

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.record_attention = False
        self.last_attention = None

    def position_bias(self) -> torch.Tensor:
        n = self.window**2
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm window attention + MLP, optionally on cyclically shifted windows."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int = 0, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._masks: dict[tuple, torch.Tensor] = {}

    def attention_mask(self, h: int, w: int, device) -> torch.Tensor | None:
        if not self.shift:
            return None
        key = (h, w, str(device))
        if key not in self._masks:
            self._masks[key] = shifted_window_mask(h, w, self.window, self.shift).to(device)
        return self._masks[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, C)"""
        b, h, w, c = x.shape
        ws, s = self.window, self.shift
        if h % ws or w % ws:
            raise ConfigError(f"window {ws} does not tile a {h}x{w} feature map")
        y = self.norm1(x)
        if s:
            y = torch.roll(y, shifts=(-s, -s), dims=(1, 2))
        mask = self.attention_mask(h, w, x.device)
        if mask is not None:
            mask = mask.to(y.dtype)
        y = self.attn(window_partition(y, ws), mask)
        y = window_reverse(y, ws, h, w)
        if s:
            y = torch.roll(y, shifts=(s, s), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch: int = 2):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, patch, patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat then linear projection: H/2, W/2, 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: int, mlp_ratio: float, merge: bool):
        super().__init__()
        self.merge = PatchMerging(dim // 2) if merge else None
        shift = window // 2
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window, shift if i % 2 else 0, mlp_ratio) for i in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x, self.norm(x).permute(0, 3, 1, 2).contiguous()


class TransformerBranch(nn.Module):
    def __init__(self, in_channels: int = 4, base_channels: int = 24, cfg: WindowAttnConfig | None = None):
        super().__init__()
        cfg = cfg or WindowAttnConfig()
        cfg.validate(base_channels)
        self.cfg = cfg
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.patch_embed = PatchEmbed(in_channels, base_channels, 2)
        self.stages = nn.ModuleList(
            SwinStage(base_channels * 2**i, cfg.depths_per_stage[i], cfg.heads_per_stage[i],
                      cfg.window, cfg.mlp_ratio, merge=i > 0)
            for i in range(NUM_LEVELS)
        )
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def attention_modules(self) -> list[WindowAttention]:
        return [m for m in self.modules() if isinstance(m, WindowAttention)]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B,{self.in_channels},H,W), got {tuple(x.shape)}")
        check_window_tiling(x.shape[2], x.shape[3], self.cfg.window)
        x = self.patch_embed(x)
        levels = []
        for stage in self.stages:
            x, out = stage(x)
            levels.append(out)
        return levels


def transformer_forward(rgbd: torch.Tensor, branch: TransformerBranch) -> list[torch.Tensor]:
    return branch(rgbd)
