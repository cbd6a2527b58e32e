"""End-to-end network: two encoder branches, fusion neck and a U-Net style decoder."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cnn_branch import CNNBranch, make_norm
from .data import DEFAULT_MAX_DEPTH, Batch
from .errors import CheckpointError, ConfigError, ShapeError
from .fusion import FUSION_MODES, FusionNeck
from .transformer_branch import TransformerBranch, WindowAttnConfig, auto_window

BRANCHES = ("cnn", "swin")
INPUTS = {"depth": 1, "rgb": 3, "rgbd": 4}
WEIGHTS_FILE = "model.pt"
SIDECAR_FILE = "model.json"


@dataclass
class ModelConfig:
    base_channels: int = 24
    input_size: tuple[int, int] = (240, 320)
    branch_a: str = "cnn"
    input_a: str = "depth"
    branch_b: str = "swin"
    input_b: str = "rgbd"
    fusion: str = "mffm"
    composite_raw: bool = False
    max_depth: float = DEFAULT_MAX_DEPTH
    norm: str = "batch"
    window: int | None = None
    heads_per_stage: tuple[int, int, int, int] = (1, 2, 4, 8)
    depths_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    mlp_ratio: float = 4.0
    ca_reduction: int = 4
    output: str = "sigmoid"
    # Depth (m) the untrained network predicts everywhere; sets the head bias.
    init_depth: float = 1.0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.heads_per_stage = tuple(self.heads_per_stage)
        self.depths_per_stage = tuple(self.depths_per_stage)

    @property
    def resolved_window(self) -> int:
        return self.window if self.window else auto_window(*self.input_size)

    def window_config(self) -> WindowAttnConfig:
        return WindowAttnConfig(self.resolved_window, self.heads_per_stage, self.depths_per_stage, self.mlp_ratio)

    def validate(self) -> "ModelConfig":
        h, w = self.input_size
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            raise ConfigError(f"input_size {self.input_size} must be positive multiples of 16")
        for name in ("branch_a", "branch_b"):
            if getattr(self, name) not in BRANCHES:
                raise ConfigError(f"{name} must be one of {BRANCHES}")
        for name in ("input_a", "input_b"):
            if getattr(self, name) not in INPUTS:
                raise ConfigError(f"{name} must be one of {tuple(INPUTS)}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")
        if self.norm not in ("batch", "group"):
            raise ConfigError("norm must be 'batch' or 'group'")
        if self.output not in ("sigmoid", "linear"):
            raise ConfigError("output must be 'sigmoid' or 'linear'")
        if self.max_depth <= 0:
            raise ConfigError("max_depth must be positive")
        if self.output == "sigmoid" and not 0 < self.init_depth < self.max_depth:
            raise ConfigError("init_depth must lie strictly inside (0, max_depth)")
        if "swin" in (self.branch_a, self.branch_b):
            self.window_config().validate(self.base_channels, h, w)
        if self.fusion == "mffm":
            for i in range(1, 4):
                if (self.base_channels * 2**i) % self.ca_reduction:
                    raise ConfigError(f"level {i + 1} channels not divisible by ca_reduction {self.ca_reduction}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DepthPrediction:
    depth: torch.Tensor
    composited: torch.Tensor | None = None

    @property
    def final(self) -> torch.Tensor:
        return self.composited if self.composited is not None else self.depth


def _branch(kind: str, in_ch: int, cfg: ModelConfig) -> nn.Module:
    if kind == "cnn":
        return CNNBranch(in_ch, cfg.base_channels, cfg.norm)
    return TransformerBranch(in_ch, cfg.base_channels, cfg.window_config())


def _select(rgbd: torch.Tensor, which: str) -> torch.Tensor:
    if which == "depth":
        return rgbd[:, 3:4]
    if which == "rgb":
        return rgbd[:, :3]
    return rgbd


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, norm: str):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False), make_norm(norm, out_ch), nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False), make_norm(norm, out_ch), nn.ReLU(inplace=True),
        )


class Decoder(nn.Module):
    """8C -> 4C -> 2C -> C -> 1, bilinear 2x upsampling with projected skips."""

    def __init__(self, base_channels: int, norm: str = "batch"):
        super().__init__()
        c = base_channels
        self.blocks = nn.ModuleList([ConvBlock(8 * c, 4 * c, norm), ConvBlock(4 * c, 2 * c, norm),
                                     ConvBlock(2 * c, c, norm), ConvBlock(c, c, norm)])
        self.skips = nn.ModuleList([nn.Conv2d(4 * c, 4 * c, 1), nn.Conv2d(2 * c, 2 * c, 1), nn.Conv2d(c, c, 1)])
        self.head = nn.Conv2d(c, 1, 1)

    @staticmethod
    def up(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, fused: list[torch.Tensor]) -> torch.Tensor:
        x = fused[3]
        for i, skip in enumerate(self.skips):
            x = self.up(self.blocks[i](x)) + skip(fused[2 - i])
        x = self.up(self.blocks[3](x))
        return self.head(x)


class TDCNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        cfg = self.cfg
        self.branch_a = _branch(cfg.branch_a, INPUTS[cfg.input_a], cfg)
        self.branch_b = _branch(cfg.branch_b, INPUTS[cfg.input_b], cfg)
        self.neck = FusionNeck(cfg.base_channels, cfg.fusion, cfg.ca_reduction)
        self.decoder = Decoder(cfg.base_channels, cfg.norm)
        if cfg.output == "sigmoid":
            p = cfg.init_depth / cfg.max_depth
            nn.init.constant_(self.decoder.head.bias, math.log(p / (1 - p)))
        else:
            nn.init.constant_(self.decoder.head.bias, cfg.init_depth)

    def check_input(self, rgbd: torch.Tensor):
        want = (4, *self.cfg.input_size)
        if rgbd.ndim != 4 or tuple(rgbd.shape[1:]) != want:
            raise ShapeError(f"model expects (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(rgbd.shape)}")

    def encode(self, rgbd: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(rgbd)
        pa = self.branch_a(_select(rgbd, self.cfg.input_a))
        pb = self.branch_b(_select(rgbd, self.cfg.input_b))
        return self.neck(pa, pb)

    def forward(self, rgbd: torch.Tensor) -> torch.Tensor:
        """Predicted depth in meters, (B, 1, H, W)."""
        logits = self.decoder(self.encode(rgbd))
        if self.cfg.output == "sigmoid":
            return torch.sigmoid(logits) * self.cfg.max_depth
        return logits

    def complete(self, batch: Batch) -> DepthPrediction:
        depth = self(batch.rgbd)
        composited = None
        if self.cfg.composite_raw:
            composited = composite(depth, batch.raw_depth, batch.mask)
        return DepthPrediction(depth, composited)


def composite(pred: torch.Tensor, raw_depth: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep trusted sensor depth outside the object mask, prediction elsewhere."""
    keep_raw = (raw_depth > 0) & (mask <= 0)
    return torch.where(keep_raw, raw_depth, pred)


def forward(batch: Batch, model: TDCNet) -> DepthPrediction:
    return model.complete(batch)


def count_params(cfg: ModelConfig | TDCNet) -> int:
    model = cfg if isinstance(cfg, nn.Module) else TDCNet(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoints


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_model(model: TDCNet, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    weights = d / WEIGHTS_FILE
    torch.save(model.state_dict(), weights)
    sidecar = {
        "config": model.cfg.to_dict(),
        "param_count": count_params(model),
        "max_depth": model.cfg.max_depth,
        "sha256": _file_hash(weights),
    }
    if extra:
        sidecar.update(extra)
    (d / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=2))
    return d


def read_sidecar(directory) -> dict:
    path = Path(directory) / SIDECAR_FILE
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {directory} (missing {SIDECAR_FILE})")
    return json.loads(path.read_text())


def build_from_sidecar(directory) -> TDCNet:
    """Rebuild the graph without touching the weights."""
    return TDCNet(ModelConfig.from_dict(read_sidecar(directory)["config"]))


def load_model(directory, verify: bool = True) -> TDCNet:
    d = Path(directory)
    meta = read_sidecar(d)
    weights = d / WEIGHTS_FILE
    if not weights.is_file():
        raise CheckpointError(f"missing weights file {weights}")
    if verify and _file_hash(weights) != meta["sha256"]:
        raise CheckpointError(f"{weights}: content hash does not match {SIDECAR_FILE}")
    model = TDCNet(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    model.eval()
    return model
