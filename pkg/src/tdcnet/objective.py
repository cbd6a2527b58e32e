"""Depth loss, surface-normal smoothness loss and the auxiliary weight schedule."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from .errors import ConfigError, LossError

NORMAL_EPS = 1e-8
CONVERGED_EPS = 1e-12


def _region_mean(values: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    region = region.to(values.dtype)
    n = region.sum()
    if n.item() <= 0:
        raise LossError("loss region is empty")
    return (values * region).sum() / n


def depth_loss(pred: torch.Tensor, gt: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Mean squared depth error over the region pixels."""
    return _region_mean((pred - gt) ** 2, region)


def image_gradients(depth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Central differences in the interior, one-sided at the borders.

    Returns (d/du, d/dv) with u along the width and v along the height, in
    depth units per pixel.
    """
    def diff(x, dim):
        n = x.shape[dim]
        if n < 2:
            return torch.zeros_like(x)
        first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1)
        last = x.narrow(dim, n - 1, 1) - x.narrow(dim, n - 2, 1)
        if n == 2:
            return torch.cat([first, last], dim)
        mid = (x.narrow(dim, 2, n - 2) - x.narrow(dim, 0, n - 2)) / 2
        return torch.cat([first, mid, last], dim)

    return diff(depth, -1), diff(depth, -2)


def surface_normals(depth: torch.Tensor) -> torch.Tensor:
    """(B,1,H,W) depth -> (B,3,H,W) unit normals ``normalize(-g_u, -g_v, 1)``."""
    gu, gv = image_gradients(depth)
    n = torch.cat([-gu, -gv, torch.ones_like(depth)], dim=1)
    return F.normalize(n, dim=1, eps=NORMAL_EPS)


def smooth_loss(pred: torch.Tensor, gt: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Mean of 1 - cos(angle between predicted and ground-truth normals)."""
    cos = (surface_normals(pred) * surface_normals(gt)).sum(dim=1, keepdim=True)
    return _region_mean(1.0 - cos, region)


@dataclass(frozen=True)
class LossState:
    """Smooth-loss weight and the last two epoch-mean smooth losses.

    ``schedule="decay"`` drops ``beta`` to a tenth of ``alpha`` while the
    ratio of the last two epoch losses stays below ``threshold``;
    ``schedule="fixed"`` keeps ``beta == alpha``.
    """

    alpha: float = 0.1
    beta: float | None = None
    threshold: float = 1.05
    schedule: str = "decay"
    history: tuple[float, ...] = ()

    def __post_init__(self):
        if self.schedule not in ("decay", "fixed"):
            raise ConfigError(f"schedule must be 'decay' or 'fixed', got {self.schedule!r}")
        if self.beta is None:
            object.__setattr__(self, "beta", self.alpha)

    @property
    def decayed(self) -> float:
        # Division keeps 0.1 / 10 == 0.01 exact, unlike 0.1 * 0.1.
        return self.alpha / 10

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "threshold": self.threshold,
                "schedule": self.schedule, "history": list(self.history)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossState":
        return cls(d["alpha"], d["beta"], d["threshold"], d["schedule"], tuple(d["history"]))


def convergence_ratio(history) -> float | None:
    if len(history) < 2:
        return None
    prev2, prev1 = history[-2], history[-1]
    if prev1 <= CONVERGED_EPS:
        return None
    return prev2 / prev1


def update_weight(state: LossState, epoch_mean_smooth_loss: float) -> LossState:
    """Record one epoch-mean smooth loss and recompute the weight.

    Evaluated afresh every epoch; nothing latches.
    """
    history = (tuple(state.history) + (float(epoch_mean_smooth_loss),))[-2:]
    if state.schedule == "fixed" or len(history) < 2:
        beta = state.alpha
    elif history[-1] <= CONVERGED_EPS:
        beta = state.decayed
    else:
        ratio = history[0] / history[1]
        beta = state.decayed if abs(ratio) < state.threshold else state.alpha
    return replace(state, beta=beta, history=history)


def total_loss(pred, gt, region, state: LossState | float, parts: bool = False):
    """``depth_loss + beta * smooth_loss``. With ``parts`` also returns both terms."""
    beta = state.beta if isinstance(state, LossState) else float(state)
    ld = depth_loss(pred, gt, region)
    ls = smooth_loss(pred, gt, region)
    total = ld + beta * ls
    return (total, ld, ls) if parts else total
