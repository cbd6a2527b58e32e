"""scikit-learn style wrapper around the training harness.

Samples carry their own targets, so ``fit`` takes a sequence of
``RgbdSample`` and ignores ``y``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import RgbdSample, SampleDataset, make_batch
from .errors import DataError, ShapeError
from .harness import TrainConfig, evaluate_samples, train
from .model import ModelConfig, TDCNet


def check_samples(X, size: tuple[int, int] | None = None) -> Sequence[RgbdSample]:
    if isinstance(X, RgbdSample):
        X = [X]
    if not isinstance(X, (list, tuple, SampleDataset)):
        raise DataError(f"expected a sequence of RgbdSample, got {type(X).__name__}")
    if len(X) == 0:
        raise DataError("no samples given")
    if isinstance(X, SampleDataset):
        return X
    bad = [type(s).__name__ for s in X if not isinstance(s, RgbdSample)]
    if bad:
        raise DataError(f"expected RgbdSample items, got {sorted(set(bad))}")
    want = size or X[0].shape
    off = [s.id for s in X if s.shape != tuple(want)]
    if off:
        raise ShapeError(f"samples {off[:5]} are not {tuple(want)}")
    return X


class TDCNetRegressor(RegressorMixin, BaseEstimator):
    def __init__(self, base_channels=8, input_size=(64, 64), fusion="mffm", branch_a="cnn", branch_b="swin",
                 input_a="depth", input_b="rgbd", composite_raw=False, max_depth=10.0, init_depth=1.0,
                 epochs=40, batch_size=16, lr=1e-3, lr_decay_every=15, alpha=0.1, loss_schedule="decay",
                 aug_flags=("hflip", "vflip", "rot90", "rotate", "depth_noise", "rgb_noise"), max_steps=None,
                 seed=0):
        self.base_channels = base_channels
        self.input_size = input_size
        self.fusion = fusion
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.input_a = input_a
        self.input_b = input_b
        self.composite_raw = composite_raw
        self.max_depth = max_depth
        self.init_depth = init_depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_every = lr_decay_every
        self.alpha = alpha
        self.loss_schedule = loss_schedule
        self.aug_flags = aug_flags
        self.max_steps = max_steps
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(base_channels=self.base_channels, input_size=tuple(self.input_size),
                            fusion=self.fusion, branch_a=self.branch_a, branch_b=self.branch_b,
                            input_a=self.input_a, input_b=self.input_b, composite_raw=self.composite_raw,
                            max_depth=self.max_depth, init_depth=self.init_depth)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_decay_every=self.lr_decay_every, alpha=self.alpha, loss_schedule=self.loss_schedule,
                           aug_flags=tuple(self.aug_flags), max_steps=self.max_steps, seed=self.seed,
                           val_fraction=0.0, out_dir=None, model=model)

    def fit(self, X, y=None):
        cfg = self._train_config().validate()
        X = check_samples(X, cfg.model.input_size)
        result = train(cfg, train_samples=X)
        self.model_: TDCNet = result.model
        self.run_log_ = result.run_log
        self.n_steps_ = result.steps
        return self

    @torch.no_grad()
    def predict(self, X, batch_size: int = 8) -> np.ndarray:
        """(N, H, W) depth in meters."""
        check_is_fitted(self, "model_")
        X = check_samples(X, self.model_.cfg.input_size)
        self.model_.eval()
        out = []
        for start in range(0, len(X), batch_size):
            batch = make_batch([X[i] for i in range(start, min(start + batch_size, len(X)))],
                               self.model_.cfg.max_depth)
            out.append(self.model_.complete(batch).final[:, 0].numpy())
        return np.concatenate(out)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Negative pooled masked RMSE, so that larger is better."""
        check_is_fitted(self, "model_")
        X = check_samples(X, self.model_.cfg.input_size)
        return -evaluate_samples(self.model_, X).rmse
