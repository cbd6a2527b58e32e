"""RGB-D samples: disk I/O, synthetic toy scenes, augmentation and batching.

Depth maps are stored on disk as 16-bit PNGs in millimeters. In memory every
depth map is float32 meters and missing depth is encoded as an exact 0.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch

from .errors import BatchError, ConfigError, FormatError, LoadError

DEFAULT_MAX_DEPTH = 10.0
# Deepest encoder stride. Every input side must be a multiple of it.
STRIDE = 16

AUG_FLAGS = frozenset({"hflip", "vflip", "rot90", "rotate", "depth_noise", "rgb_noise"})
CORRUPTIONS = ("zero", "background", "noisy-background")

RGB_FILE = "rgb.png"
RAW_FILE = "depth_raw.png"
GT_FILE = "depth_gt.png"
MASK_FILE = "mask.png"
VALID_FILE = "valid.png"
MANIFEST = "manifest.txt"


@dataclass
class RgbdSample:
    """One scene.

    ``rgb`` is (H, W, 3) float32 in [0, 1]; depth maps are (H, W) float32
    meters; ``mask`` and ``valid`` are (H, W) bool.
    """

    rgb: np.ndarray
    raw_depth: np.ndarray
    gt_depth: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {
            "rgb": self.rgb.shape[:2],
            "raw_depth": self.raw_depth.shape,
            "gt_depth": self.gt_depth.shape,
            "mask": self.mask.shape,
            "valid": self.valid.shape,
        }
        if len(set(shapes.values())) != 1 or self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise FormatError(f"sample {self.id!r}: inconsistent map shapes {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.raw_depth.shape)

    @property
    def region(self) -> np.ndarray:
        """Pixels that are both transparent-object and trustworthy."""
        return self.mask & self.valid

    def replace(self, **changes) -> "RgbdSample":
        return dataclasses.replace(self, **changes)


@dataclass
class Batch:
    """B samples stacked as NCHW float32 tensors.

    ``rgbd`` holds RGB plus the normalized raw depth; ``raw_depth`` and
    ``gt_depth`` stay in meters.
    """

    rgbd: torch.Tensor
    raw_depth: torch.Tensor
    gt_depth: torch.Tensor
    mask: torch.Tensor
    valid: torch.Tensor
    ids: list[str]
    max_depth: float = DEFAULT_MAX_DEPTH

    def __len__(self):
        return self.rgbd.shape[0]

    @property
    def region(self) -> torch.Tensor:
        return self.mask * self.valid

    def to(self, device) -> "Batch":
        return dataclasses.replace(
            self,
            rgbd=self.rgbd.to(device),
            raw_depth=self.raw_depth.to(device),
            gt_depth=self.gt_depth.to(device),
            mask=self.mask.to(device),
            valid=self.valid.to(device),
        )


@dataclass
class ToySceneConfig:
    image_size: tuple[int, int] = (64, 64)
    n_objects: int = 3
    depth_range: tuple[float, float] = (0.5, 1.5)
    corruption: str = "background"
    seed: int = 0
    noise_std: float = 0.01

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % STRIDE or w % STRIDE:
            raise ConfigError(f"image_size {self.image_size} must be positive multiples of {STRIDE}")
        near, far = self.depth_range
        if not 0 < near < far:
            raise ConfigError(f"depth_range {self.depth_range} must satisfy 0 < near < far")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"corruption must be one of {CORRUPTIONS}, got {self.corruption!r}")
        return self


# ---------------------------------------------------------------------------
# disk I/O


def _read(path: Path, flags: int) -> np.ndarray:
    if not path.is_file():
        raise LoadError(f"missing file: {path}")
    img = cv2.imread(str(path), flags)
    if img is None:
        raise FormatError(f"unreadable image: {path}")
    return img


def _read_depth(path: Path, max_depth: float) -> np.ndarray:
    img = _read(path, cv2.IMREAD_UNCHANGED)
    if img.ndim != 2:
        raise FormatError(f"{path}: depth must be single-channel, got shape {img.shape}")
    depth = img.astype(np.float32) / 1000.0
    depth[(depth < 0) | (depth > max_depth)] = 0.0
    return depth


def _write_depth(path: Path, depth: np.ndarray):
    mm = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 1000.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), mm):
        raise LoadError(f"could not write {path}")


def sample_dir(dataset_root, sample_id: str, split: str | None = None) -> Path:
    root = Path(dataset_root)
    return root / split / sample_id if split else root / sample_id


def load_sample(
    dataset_root,
    sample_id: str,
    split: str | None = None,
    image_size: tuple[int, int] | None = None,
    max_depth: float = DEFAULT_MAX_DEPTH,
) -> RgbdSample:
    """Load one sample from ``<root>[/<split>]/<id>/``.

    Depth outside ``[0, max_depth]`` becomes missing. With ``image_size``
    the sample is resized: bilinear for RGB, nearest for depth and masks.
    """
    d = sample_dir(dataset_root, sample_id, split)
    if not d.is_dir():
        raise LoadError(f"missing sample directory: {d}")
    bgr = _read(d / RGB_FILE, cv2.IMREAD_COLOR)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    raw = _read_depth(d / RAW_FILE, max_depth)
    gt = _read_depth(d / GT_FILE, max_depth)
    mask = _read(d / MASK_FILE, cv2.IMREAD_GRAYSCALE) > 127
    if (d / VALID_FILE).is_file():
        valid = _read(d / VALID_FILE, cv2.IMREAD_GRAYSCALE) > 127
    else:
        valid = np.ones_like(mask)

    shapes = {f: a.shape[:2] for f, a in
              [(RGB_FILE, rgb), (RAW_FILE, raw), (GT_FILE, gt), (MASK_FILE, mask), (VALID_FILE, valid)]}
    if len(set(shapes.values())) != 1:
        raise FormatError(f"{d}: mismatched resolutions {shapes}")
    orig = rgb.shape[:2]

    if image_size is not None and tuple(image_size) != orig:
        h, w = image_size
        rgb = cv2.resize(rgb, (w, h), interpolation=cv2.INTER_LINEAR)
        raw = cv2.resize(raw, (w, h), interpolation=cv2.INTER_NEAREST)
        gt = cv2.resize(gt, (w, h), interpolation=cv2.INTER_NEAREST)
        mask = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) > 0
        valid = cv2.resize(valid.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) > 0

    valid = valid & (gt > 0)
    meta = {"source": str(d), "original_size": list(orig), "max_depth": max_depth,
            "depth_normalization": "depth / max_depth"}
    return RgbdSample(np.clip(rgb, 0, 1), raw, gt, mask, valid, sample_id, meta)


def write_sample(sample: RgbdSample, dataset_root, split: str | None = None) -> Path:
    d = sample_dir(dataset_root, sample.id, split)
    d.mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(np.clip(sample.rgb, 0, 1) * 255).astype(np.uint8)
    cv2.imwrite(str(d / RGB_FILE), cv2.cvtColor(rgb8, cv2.COLOR_RGB2BGR))
    _write_depth(d / RAW_FILE, sample.raw_depth)
    _write_depth(d / GT_FILE, sample.gt_depth)
    cv2.imwrite(str(d / MASK_FILE), sample.mask.astype(np.uint8) * 255)
    cv2.imwrite(str(d / VALID_FILE), sample.valid.astype(np.uint8) * 255)
    return d


def read_manifest(dataset_root, split: str | None = None) -> list[str]:
    root = Path(dataset_root) / split if split else Path(dataset_root)
    path = root / MANIFEST
    if not path.is_file():
        raise LoadError(f"missing manifest: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def write_manifest(ids: Iterable[str], dataset_root, split: str | None = None) -> Path:
    root = Path(dataset_root) / split if split else Path(dataset_root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST
    path.write_text("".join(f"{i}\n" for i in ids))
    return path


class SampleDataset(Sequence):
    """Lazy, index-addressable view of one split on disk."""

    def __init__(self, dataset_root, split: str | None = None, image_size=None,
                 max_depth: float = DEFAULT_MAX_DEPTH, ids: list[str] | None = None):
        self.root = Path(dataset_root)
        self.split = split
        self.image_size = tuple(image_size) if image_size is not None else None
        self.max_depth = max_depth
        self.ids = list(ids) if ids is not None else read_manifest(self.root, split)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        return load_sample(self.root, self.ids[idx], self.split, self.image_size, self.max_depth)


# ---------------------------------------------------------------------------
# synthetic scenes


def _plane(h, w, d0, gx, gy, cx, cy):
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return d0 + gx * (u - cx) + gy * (v - cy)


def generate_toy_scene(cfg: ToySceneConfig, sample_id: str | None = None) -> RgbdSample:
    """Render a deterministic synthetic scene.

    Slanted rectangles and ellipses float at distinct depths in front of a
    tilted background plane. The nearest object is the "transparent" one:
    its raw depth is corrupted according to ``cfg.corruption``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    near, far = cfg.depth_range
    span = far - near

    # Background occupies the far 30% of the range, objects the near 55%.
    bg_lo = near + 0.70 * span
    bg = _plane(h, w, rng.uniform(bg_lo + 0.05 * span, far - 0.05 * span),
                rng.uniform(-0.05, 0.05) * span / w, rng.uniform(-0.05, 0.05) * span / h,
                w / 2, h / 2)
    bg = np.clip(bg, bg_lo, far)

    gt = bg.copy()
    rgb = np.empty((h, w, 3))
    bg_albedo = rng.uniform(0.3, 0.7, size=3)
    rgb[:] = bg_albedo
    owner = np.full((h, w), -1)

    # Distinct depths, farthest first; the last one drawn is the transparent object.
    slots = np.sort(rng.choice(np.linspace(near, near + 0.55 * span, 4 * cfg.n_objects + 1),
                               size=cfg.n_objects, replace=False))[::-1]
    v, u = np.mgrid[0:h, 0:w]
    for k, d0 in enumerate(slots):
        oh = rng.uniform(0.2, 0.45) * h
        ow = rng.uniform(0.2, 0.45) * w
        cy = rng.uniform(oh / 2, h - oh / 2)
        cx = rng.uniform(ow / 2, w - ow / 2)
        if rng.random() < 0.5:
            inside = (np.abs(v - cy) <= oh / 2) & (np.abs(u - cx) <= ow / 2)
        else:
            inside = ((v - cy) / (oh / 2)) ** 2 + ((u - cx) / (ow / 2)) ** 2 <= 1.0
        surf = _plane(h, w, d0, rng.uniform(-0.02, 0.02) * span / w,
                      rng.uniform(-0.02, 0.02) * span / h, cx, cy)
        surf = np.clip(surf, near, far)
        draw = inside & (surf < gt)
        gt[draw] = surf[draw]
        owner[draw] = k
        rgb[draw] = rng.uniform(0.05, 0.95, size=3)

    mask = owner == cfg.n_objects - 1
    # Glass: mostly the background color with a faint tint.
    rgb[mask] = 0.75 * bg_albedo + 0.25 * rng.uniform(0.6, 1.0, size=3)

    raw = gt.copy()
    if cfg.corruption == "zero":
        raw[mask] = 0.0
    elif cfg.corruption == "background":
        raw[mask] = bg[mask]
    else:
        noisy = bg[mask] + rng.normal(0.0, cfg.noise_std, size=int(mask.sum()))
        raw[mask] = np.maximum(noisy, 0.0)

    sid = sample_id if sample_id is not None else f"toy_{cfg.seed}"
    meta = {"generator": "toy", "corruption": cfg.corruption, "seed": cfg.seed,
            "depth_range": list(cfg.depth_range)}
    return RgbdSample(
        rgb.astype(np.float32), raw.astype(np.float32), gt.astype(np.float32),
        mask, np.ones((h, w), dtype=bool), sid, meta,
    )


def toy_samples(n: int, seed: int = 0, **cfg_kwargs) -> list[RgbdSample]:
    """``n`` independent toy scenes derived from one base seed."""
    out = []
    for i in range(n):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        cfg = ToySceneConfig(seed=sub, **cfg_kwargs)
        out.append(generate_toy_scene(cfg, sample_id=f"toy_{seed}_{i:05d}"))
    return out


def make_toy_dataset(out_dir, n: int, seed: int = 0, split: str = "train", **cfg_kwargs) -> list[str]:
    samples = toy_samples(n, seed, **cfg_kwargs)
    for s in samples:
        write_sample(s, out_dir, split)
    ids = [s.id for s in samples]
    write_manifest(ids, out_dir, split)
    return ids


# ---------------------------------------------------------------------------
# augmentation


def _geom(sample: RgbdSample, fn) -> RgbdSample:
    return sample.replace(
        rgb=np.ascontiguousarray(fn(sample.rgb)),
        raw_depth=np.ascontiguousarray(fn(sample.raw_depth)),
        gt_depth=np.ascontiguousarray(fn(sample.gt_depth)),
        mask=np.ascontiguousarray(fn(sample.mask)),
        valid=np.ascontiguousarray(fn(sample.valid)),
    )


def _small_rotation(sample: RgbdSample, angle: float) -> RgbdSample:
    h, w = sample.shape
    m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, 1.0)

    def warp(a, interp):
        return cv2.warpAffine(a, m, (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    return sample.replace(
        rgb=warp(sample.rgb, cv2.INTER_LINEAR),
        raw_depth=warp(sample.raw_depth, cv2.INTER_NEAREST),
        gt_depth=warp(sample.gt_depth, cv2.INTER_NEAREST),
        mask=warp(sample.mask.astype(np.uint8), cv2.INTER_NEAREST) > 0,
        # Pixels rotated in from outside the frame carry no ground truth.
        valid=warp(sample.valid.astype(np.uint8), cv2.INTER_NEAREST) > 0,
    )


def augment(
    sample: RgbdSample,
    rng_seed: int,
    flags: Iterable[str] = (),
    depth_noise_std: float = 0.005,
    rgb_noise_std: float = 0.02,
    max_angle: float = 5.0,
) -> RgbdSample:
    """Apply every transform named in ``flags``.

    Geometric transforms hit all maps identically. Depth noise touches only
    measured pixels of ``raw_depth``; ``gt_depth`` is never perturbed.
    """
    flags = set(flags)
    unknown = flags - AUG_FLAGS
    if unknown:
        raise ConfigError(f"unknown augmentation flags: {sorted(unknown)}")
    rng = np.random.default_rng(rng_seed)
    out = sample
    if "hflip" in flags:
        out = _geom(out, lambda a: a[:, ::-1])
    if "vflip" in flags:
        out = _geom(out, lambda a: a[::-1])
    if "rot90" in flags:
        out = _geom(out, np.rot90)
    if "rotate" in flags:
        out = _small_rotation(out, float(rng.uniform(-max_angle, max_angle)))
    if "depth_noise" in flags and depth_noise_std > 0:
        raw = out.raw_depth
        noise = rng.normal(0.0, depth_noise_std, size=raw.shape).astype(np.float32)
        out = out.replace(raw_depth=np.where(raw > 0, np.maximum(raw + noise, 0.0), 0.0).astype(np.float32))
    if "rgb_noise" in flags and rgb_noise_std > 0:
        noise = rng.normal(0.0, rgb_noise_std, size=out.rgb.shape).astype(np.float32)
        out = out.replace(rgb=np.clip(out.rgb + noise, 0.0, 1.0).astype(np.float32))
    return out


def random_augment(sample: RgbdSample, rng: np.random.Generator, flags: Iterable[str],
                   p: float = 0.5, **kwargs) -> RgbdSample:
    """Training-time augmentation: each enabled geometric flag fires with
    probability ``p``; noise flags always fire. ``rot90`` is skipped for
    non-square samples because it would change the input size."""
    chosen = []
    for f in sorted(flags):
        if f in ("depth_noise", "rgb_noise"):
            chosen.append(f)
        elif f == "rot90" and sample.shape[0] != sample.shape[1]:
            continue
        elif rng.random() < p:
            chosen.append(f)
    return augment(sample, int(rng.integers(2**31)), chosen, **kwargs)


# ---------------------------------------------------------------------------
# batching


def make_batch(samples: Sequence[RgbdSample], max_depth: float = DEFAULT_MAX_DEPTH) -> Batch:
    if len(samples) == 0:
        raise BatchError("cannot batch an empty list of samples")
    sizes = {s.shape for s in samples}
    if len(sizes) != 1:
        raise BatchError(f"samples have heterogeneous sizes: {sorted(sizes)}")

    def stack(arrs):
        return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrs]))

    rgb = torch.from_numpy(np.stack([s.rgb.transpose(2, 0, 1) for s in samples]).astype(np.float32))
    raw = stack([s.raw_depth for s in samples]).unsqueeze(1)
    rgbd = torch.cat([rgb, normalize_depth(raw, max_depth)], dim=1)
    return Batch(
        rgbd=rgbd,
        raw_depth=raw,
        gt_depth=stack([s.gt_depth for s in samples]).unsqueeze(1),
        mask=stack([s.mask for s in samples]).unsqueeze(1),
        valid=stack([s.valid for s in samples]).unsqueeze(1),
        ids=[s.id for s in samples],
        max_depth=max_depth,
    )


def normalize_depth(depth: torch.Tensor, max_depth: float = DEFAULT_MAX_DEPTH) -> torch.Tensor:
    # Missing (0) stays 0.
    return (depth / max_depth).clamp(0.0, 1.0)


def check_divisible(h: int, w: int, stride: int = STRIDE):
    if h % stride or w % stride:
        raise ConfigError(f"input size {h}x{w} must be divisible by {stride}")


def list_split(dataset_root, split: str | None = None) -> list[str]:
    try:
        return read_manifest(dataset_root, split)
    except LoadError:
        root = Path(dataset_root) / split if split else Path(dataset_root)
        if not root.is_dir():
            raise
        return sorted(p for p in os.listdir(root) if (root / p).is_dir())
