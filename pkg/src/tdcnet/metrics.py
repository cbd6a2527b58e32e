"""Masked depth-completion metrics and relative-error maps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import MetricError

THRESHOLDS = (1.05, 1.10, 1.25)
ERROR_MAP_SCALE = 0.2
OUTSIDE_GRAY = 128


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float
    n_pixels: int
    n_samples: int
    aggregation: str = "pooled"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None, config_hash: str | None = None, **extra) -> str:
        d = {"aggregation": self.aggregation, "config_hash": config_hash, **self.to_dict(), **extra}
        text = json.dumps(d, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class MetricsAccumulator:
    """Mergeable running sums. Pooled mode weights every pixel equally;
    per-image mode averages per-sample metrics."""

    sq: float = 0.0
    rel: float = 0.0
    abs: float = 0.0
    hits: list = field(default_factory=lambda: [0, 0, 0])
    n_pixels: int = 0
    n_samples: int = 0
    per_image: list = field(default_factory=list)

    def add(self, pred, gt, region, sample_id: str = "?"):
        d, ds, r = _np(pred), _np(gt), _np(region) > 0
        d, ds = d[r], ds[r]
        if ds.size == 0:
            raise MetricError(f"sample {sample_id}: empty evaluation region")
        if np.any(ds <= 0):
            raise MetricError(f"sample {sample_id}: ground truth must be > 0 inside the region")
        err = d - ds
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(d / ds, ds / d)
        ratio = np.nan_to_num(ratio, nan=np.inf)
        sq, rel, ab = float(np.sum(err**2)), float(np.sum(np.abs(err) / ds)), float(np.sum(np.abs(err)))
        hits = [int(np.sum(ratio < t)) for t in THRESHOLDS]
        self.sq += sq
        self.rel += rel
        self.abs += ab
        self.hits = [a + b for a, b in zip(self.hits, hits)]
        self.n_pixels += ds.size
        self.n_samples += 1
        n = ds.size
        self.per_image.append((np.sqrt(sq / n), rel / n, ab / n, *[100.0 * h / n for h in hits]))
        return self

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        return MetricsAccumulator(
            self.sq + other.sq, self.rel + other.rel, self.abs + other.abs,
            [a + b for a, b in zip(self.hits, other.hits)],
            self.n_pixels + other.n_pixels, self.n_samples + other.n_samples,
            self.per_image + other.per_image,
        )

    def report(self, aggregation: str = "pooled") -> MetricsReport:
        if self.n_pixels == 0:
            raise MetricError("no pixels accumulated")
        if aggregation == "pooled":
            n = self.n_pixels
            vals = (np.sqrt(self.sq / n), self.rel / n, self.abs / n, *[100.0 * h / n for h in self.hits])
        elif aggregation == "per_image":
            vals = tuple(np.mean(np.array(self.per_image), axis=0))
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        return MetricsReport(*map(float, vals), self.n_pixels, self.n_samples, aggregation)


def compute_metrics(pred, gt, region, sample_ids=None, aggregation: str = "pooled") -> MetricsReport:
    """Metrics over the region pixels of one map or a stack of samples.

    Inputs are (H, W), or stacks with a leading sample axis ((N, H, W) or
    (N, 1, H, W)); pixels of all samples are pooled by default.
    """
    pred, gt, region = _np(pred), _np(gt), _np(region)
    if pred.ndim <= 2:
        pred, gt, region = pred[None], gt[None], region[None]
    acc = MetricsAccumulator()
    for i in range(pred.shape[0]):
        sid = sample_ids[i] if sample_ids is not None else str(i)
        acc.add(pred[i], gt[i], region[i], sid)
    return acc.report(aggregation)


def relative_error(pred, gt, region) -> np.ndarray:
    d, ds, r = _np(pred), _np(gt), _np(region) > 0
    if np.any(ds[r] <= 0):
        raise MetricError("ground truth must be > 0 inside the region")
    out = np.zeros_like(ds)
    out[r] = np.abs(d[r] - ds[r]) / ds[r]
    return out


def error_map(pred, gt, region, scale: float = ERROR_MAP_SCALE) -> np.ndarray:
    """(H, W, 3) uint8 RGB rendering of ``|d - d*| / d*`` on a fixed [0, scale]
    jet colormap; pixels outside the region are gray 128."""
    pred, gt, region = (np.squeeze(_np(a)) for a in (pred, gt, region))
    rel = relative_error(pred, gt, region)
    idx = np.round(np.clip(rel / scale, 0.0, 1.0) * 255).astype(np.uint8)
    bgr = cv2.applyColorMap(idx, cv2.COLORMAP_JET)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    rgb[~(region > 0)] = OUTSIDE_GRAY
    return rgb


def save_error_map(path, pred, gt, region, scale: float = ERROR_MAP_SCALE) -> Path:
    img = error_map(pred, gt, region, scale)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    return path
