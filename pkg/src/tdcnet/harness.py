"""Training loop, step learning-rate schedule, checkpoints, evaluation and prediction."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    AUG_FLAGS, RgbdSample, SampleDataset, _write_depth, load_sample, make_batch, random_augment,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .metrics import MetricsAccumulator, MetricsReport, error_map, save_error_map
from .model import DepthPrediction, ModelConfig, TDCNet, load_model, save_model
from .objective import LossState, total_loss, update_weight

log = logging.getLogger(__name__)

TRAIN_STATE_FILE = "train_state.pt"
RUN_LOG_FILE = "run_log.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 15
    alpha: float = 0.1
    loss_schedule: str = "decay"
    loss_region: str = "mask"
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = None
    seed: int = 0
    deterministic: bool = True
    max_steps: int | None = None
    train_data: str | None = None
    train_split: str | None = "train"
    val_data: str | None = None
    val_split: str | None = None
    val_fraction: float = 0.1
    aug_flags: tuple[str, ...] = ("hflip", "vflip", "rot90", "rotate", "depth_noise", "rgb_noise")
    aug_prob: float = 0.5
    depth_noise_std: float = 0.005
    eval_batch_size: int = 8
    out_dir: str | None = "runs/tdcnet"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.aug_flags = tuple(self.aug_flags)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.loss_schedule not in ("decay", "fixed"):
            raise ConfigError("loss_schedule must be 'decay' or 'fixed'")
        if self.loss_region not in ("mask", "valid"):
            raise ConfigError("loss_region must be 'mask' or 'valid'")
        unknown = set(self.aug_flags) - AUG_FLAGS
        if unknown:
            raise ConfigError(f"unknown augmentation flags {sorted(unknown)}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        self.model.validate()
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        if not self.lr_decay_every:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Accepts flat key-value maps: model fields may sit at top level or
        under a ``model`` table."""
        d = dict(d)
        own = {f.name for f in dataclasses.fields(cls)} - {"model"}
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        model_kw = dict(d.pop("model", None) or {})
        kw = {}
        for k, v in d.items():
            if k in own:
                kw[k] = v
            elif k in model_names:
                model_kw[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        try:
            return cls(model=ModelConfig.from_dict(model_kw), **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_config_file(path))


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e


class RunLog:
    """Append-only per-epoch records, persisted as JSON lines."""

    VOLATILE = ("wall_time",)

    def __init__(self, records: list[dict] | None = None, path=None):
        self.records = list(records or [])
        self.path = Path(path) if path else None

    def append(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def trajectory(self) -> list[dict]:
        """Records without wall-clock fields, for reproducibility comparisons."""
        return [{k: v for k, v in r.items() if k not in self.VOLATILE} for r in self.records]

    def rewrite(self):
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(json.dumps(r) + "\n" for r in self.records))

    @classmethod
    def read(cls, path) -> "RunLog":
        path = Path(path)
        lines = path.read_text().splitlines() if path.is_file() else []
        return cls([json.loads(l) for l in lines if l.strip()], path)


@dataclass
class TrainResult:
    model: TDCNet
    run_log: RunLog
    checkpoint: Path | None
    steps: int


def set_determinism(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _split_by_hash(ids: list[str], fraction: float) -> tuple[list[int], list[int]]:
    train, val = [], []
    for i, sid in enumerate(ids):
        bucket = int(hashlib.sha1(sid.encode()).hexdigest(), 16) % 1000
        (val if bucket < fraction * 1000 else train).append(i)
    if not train or not val:
        return list(range(len(ids))), []
    return train, val


def _resolve_data(cfg: TrainConfig, train_samples, val_samples):
    size = cfg.model.input_size
    md = cfg.model.max_depth
    if train_samples is None:
        if not cfg.train_data:
            raise ConfigError("no training data: set train_data or pass samples")
        train_samples = SampleDataset(cfg.train_data, cfg.train_split, size, md)
    if val_samples is None and cfg.val_data:
        val_samples = SampleDataset(cfg.val_data, cfg.val_split, size, md)
    if val_samples is None and cfg.val_fraction > 0:
        if isinstance(train_samples, SampleDataset):
            tr, va = _split_by_hash(train_samples.ids, cfg.val_fraction)
            if va:
                full = train_samples
                val_samples = SampleDataset(full.root, full.split, size, md, [full.ids[i] for i in va])
                train_samples = SampleDataset(full.root, full.split, size, md, [full.ids[i] for i in tr])
        else:
            tr, va = _split_by_hash([s.id for s in train_samples], cfg.val_fraction)
            if va:
                val_samples = [train_samples[i] for i in va]
                train_samples = [train_samples[i] for i in tr]
    if len(train_samples) == 0:
        raise DataError("training set is empty")
    return train_samples, val_samples


def _loss_region(batch, which: str) -> torch.Tensor:
    return batch.region if which == "mask" else batch.valid


def _checkpoint(model, opt, state, epoch, steps, best, run_log, cfg, directory):
    d = save_model(model, directory)
    torch.save({
        "optimizer": opt.state_dict(),
        "loss_state": state.to_dict(),
        "epoch": epoch,
        "steps": steps,
        "best": best,
        "run_log": run_log.records,
        "train_config": cfg.to_dict(),
    }, d / TRAIN_STATE_FILE)
    return d


def train(cfg: TrainConfig, resume=None, train_samples: Sequence[RgbdSample] | None = None,
          val_samples: Sequence[RgbdSample] | None = None) -> TrainResult:
    """Train to ``cfg.epochs`` (or ``cfg.max_steps`` optimizer steps).

    The smooth-loss weight is updated once per epoch from that epoch's mean
    smooth loss. Shuffling and augmentation draw from a generator seeded by
    (seed, epoch), so resuming from a checkpoint replays the same batches.
    """
    cfg.validate()
    set_determinism(cfg.seed, cfg.deterministic)
    train_set, val_set = _resolve_data(cfg, train_samples, val_samples)

    model = TDCNet(cfg.model)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    state = LossState(alpha=cfg.alpha, schedule=cfg.loss_schedule)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    run_log = RunLog(path=out / RUN_LOG_FILE if out else None)
    start_epoch, steps, best = 0, 0, math.inf

    if resume is not None:
        rdir = Path(resume)
        if not (rdir / TRAIN_STATE_FILE).is_file():
            raise CheckpointError(f"cannot resume: no {TRAIN_STATE_FILE} in {rdir}")
        model = load_model(rdir)
        if model.cfg.to_dict() != cfg.model.to_dict():
            raise CheckpointError("resume checkpoint was trained with a different model config")
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        ts = torch.load(rdir / TRAIN_STATE_FILE, map_location="cpu", weights_only=False)
        opt.load_state_dict(ts["optimizer"])
        state = LossState.from_dict(ts["loss_state"])
        start_epoch, steps, best = ts["epoch"] + 1, ts["steps"], ts["best"]
        run_log.records = list(ts["run_log"])
        run_log.rewrite()
    elif run_log.path is not None:
        run_log.rewrite()

    last_dir = None
    md = cfg.model.max_depth
    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        beta_used = state.beta
        sums = np.zeros(3)
        step_losses = []
        model.train()
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            samples = [random_augment(train_set[int(i)], rng, cfg.aug_flags, cfg.aug_prob,
                                      depth_noise_std=cfg.depth_noise_std)
                       for i in order[start:start + cfg.batch_size]]
            batch = make_batch(samples, md)
            region = _loss_region(batch, cfg.loss_region)
            if region.sum() == 0:
                log.warning("skipping batch %s: empty loss region", batch.ids)
                continue
            pred = model(batch.rgbd)
            loss, ld, ls = total_loss(pred, batch.gt_depth, region, state, parts=True)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {batch.ids}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            steps += 1
            vals = (loss.item(), ld.item(), ls.item())
            sums += vals
            step_losses.append(vals[0])

        if not step_losses:
            raise DataError(f"epoch {epoch + 1}: no usable batches")
        mean_total, mean_ld, mean_ls = (sums / len(step_losses)).tolist()
        state = update_weight(state, mean_ls)
        record = {
            "epoch": epoch + 1,
            "depth_loss": mean_ld,
            "smooth_loss": mean_ls,
            "total_loss": mean_total,
            "beta": beta_used,
            "beta_next": state.beta,
            "lr": lr,
            "steps": steps,
            "step_losses": step_losses,
        }
        if val_set:
            report = evaluate_samples(model, val_set, cfg.eval_batch_size)
            record["val"] = report.to_dict()
            score = report.rmse
        else:
            score = mean_total
        record["wall_time"] = time.perf_counter() - t0
        run_log.append(record)
        log.info("epoch %d: L_d=%.5f L_s=%.5f beta=%g lr=%g", epoch + 1, mean_ld, mean_ls, beta_used, lr)

        if out is not None:
            improved = score < best
            best = min(best, score)
            last_dir = _checkpoint(model, opt, state, epoch, steps, best, run_log, cfg, out / "last")
            if improved:
                _checkpoint(model, opt, state, epoch, steps, best, run_log, cfg, out / "best")

    model.eval()
    return TrainResult(model, run_log, last_dir, steps)


# ---------------------------------------------------------------------------
# evaluation


def resolve_checkpoint(path) -> Path:
    p = Path(path)
    if (p / "model.json").is_file():
        return p
    for sub in ("best", "last"):
        if (p / sub / "model.json").is_file():
            return p / sub
    raise CheckpointError(f"no checkpoint found at {p}")


@torch.no_grad()
def evaluate_samples(model: TDCNet, samples: Sequence[RgbdSample], batch_size: int = 8,
                     error_maps_dir=None, aggregation: str = "pooled") -> MetricsReport:
    size = model.cfg.input_size
    if not isinstance(samples, SampleDataset):
        bad = [s.id for s in samples if s.shape != size]
        if bad:
            raise ShapeError(f"samples {bad[:5]} do not match model input size {size}")
    was_training = model.training
    model.eval()
    acc = MetricsAccumulator()
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in range(start, min(start + batch_size, len(samples)))]
        for s in chunk:
            if s.shape != size:
                raise ShapeError(f"sample {s.id} is {s.shape}, model expects {size}")
        batch = make_batch(chunk, model.cfg.max_depth)
        depth = model.complete(batch).final
        for i, sid in enumerate(batch.ids):
            region = batch.region[i, 0]
            if region.sum() == 0:
                log.warning("sample %s has an empty evaluation region", sid)
                continue
            acc.add(depth[i, 0], batch.gt_depth[i, 0], region, sid)
            if error_maps_dir is not None:
                save_error_map(Path(error_maps_dir) / f"{sid}.png", depth[i, 0], batch.gt_depth[i, 0], region)
    model.train(was_training)
    return acc.report(aggregation)


def evaluate(checkpoint, dataset_root, split: str | None = None, error_maps_dir=None,
             aggregation: str = "pooled", batch_size: int = 8, report_path=None) -> MetricsReport:
    ckpt = resolve_checkpoint(checkpoint)
    model = load_model(ckpt)
    ds = SampleDataset(dataset_root, split, model.cfg.input_size, model.cfg.max_depth)
    if len(ds) == 0:
        raise DataError(f"split {split!r} under {dataset_root} is empty")
    report = evaluate_samples(model, ds, batch_size, error_maps_dir, aggregation)
    if report_path is not None:
        report.to_json(report_path, config_hash=model.cfg.hash(), checkpoint=str(ckpt),
                       dataset=str(dataset_root), split=split)
    return report


@torch.no_grad()
def predict_sample(model: TDCNet, sample: RgbdSample) -> DepthPrediction:
    if sample.shape != model.cfg.input_size:
        raise ShapeError(f"sample {sample.id} is {sample.shape}, model expects {model.cfg.input_size}")
    model.eval()
    return model.complete(make_batch([sample], model.cfg.max_depth))


def predict(checkpoint, sample_path, out_dir) -> tuple[DepthPrediction, np.ndarray | None]:
    """Predict one sample directory; writes ``depth_pred.png`` (16-bit mm) and,
    when ground truth covers the object, ``error_map.png``."""
    ckpt = resolve_checkpoint(checkpoint)
    model = load_model(ckpt)
    sp = Path(sample_path)
    sample = load_sample(sp.parent, sp.name, None, model.cfg.input_size, model.cfg.max_depth)
    pred = predict_sample(model, sample)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depth = pred.final[0, 0].numpy()
    _write_depth(out / "depth_pred.png", depth)
    emap = None
    region = sample.region
    if region.any():
        emap = error_map(depth, sample.gt_depth, region)
        save_error_map(out / "error_map.png", depth, sample.gt_depth, region)
    return pred, emap
