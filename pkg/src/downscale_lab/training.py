"""Dataset assembly, standardization, optimizers, and the training loop."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DivergedAtStep, EmptyTrainSet, ShapeMismatch
from .grid import DailyGridSeries
from .models import (
    EdsrConfig,
    FnoConfig,
    ModelParams,
    config_from_dict,
    forward,
    init_params,
    model_input,
    predict,
    save_params,
)
from .resample import Direction, KernelKind, ResamplePlan, coarsen


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive (first, last) year ranges."""

    train_years: tuple
    val_years: tuple
    test_years: tuple = ()

    def __post_init__(self):
        sets = [set(self._expand(r)) for r in (self.train_years, self.val_years, self.test_years)]
        for i in range(3):
            for j in range(i + 1, 3):
                if sets[i] & sets[j]:
                    raise ConfigError(f"split year ranges overlap: {sorted(sets[i] & sets[j])}")

    @staticmethod
    def _expand(rng):
        if not rng:
            return []
        first, last = rng
        return list(range(int(first), int(last) + 1))

    @property
    def train(self):
        return self._expand(self.train_years)

    @property
    def val(self):
        return self._expand(self.val_years)

    @property
    def test(self):
        return self._expand(self.test_years)

    def to_dict(self):
        return {"train": list(self.train_years), "val": list(self.val_years), "test": list(self.test_years)}


@dataclass
class PairSet:
    """Coarse inputs (N x h x w), fine targets (N x H x W), and their dates."""

    inputs: np.ndarray
    targets: np.ndarray
    dates: np.ndarray  # datetime64[D]

    def __len__(self):
        return self.inputs.shape[0]

    def years(self):
        return self.dates.astype("datetime64[Y]").astype(int) + 1970

    def subset(self, years) -> "PairSet":
        mask = np.isin(self.years(), list(years))
        return PairSet(self.inputs[mask], self.targets[mask], self.dates[mask])

    def __getitem__(self, i):
        return self.inputs[i], self.targets[i]


def build_pairs(hr: DailyGridSeries, factor: int, kernel=KernelKind.CUBIC_SPLINE) -> PairSet:
    """One (coarsened input, fine target) pair per day."""
    plan = ResamplePlan(kernel, factor, Direction.COARSEN)
    targets = np.array(hr.values)
    return PairSet(coarsen(targets, plan), targets, hr.dates())


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float
    floor: float = 1e-8

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_standardizer(hr: DailyGridSeries, split: SplitSpec, floor: float = 1e-8) -> Standardizer:
    """Global mean and population std over training-year pixels only."""
    mask = np.isin(hr.years(), split.train)
    if not mask.any():
        raise EmptyTrainSet(f"no days of the series fall in training years {split.train_years}")
    vals = hr.values[mask]
    mean = float(np.nanmean(vals))
    std = float(np.nanstd(vals))
    return Standardizer(mean, max(std, floor), floor)


# ----------------------------------------------------------------------------
# optimizer and schedule


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0, mode="adam", t=1):
    """One in-place Adam/AdamW update over dicts of arrays.

    ``mode="adam"`` adds ``weight_decay * p`` to the gradient (L2);
    ``mode="adamw"`` multiplies ``p`` by ``1 - lr * weight_decay`` first.
    ``state`` maps name -> (m, v) and is created on first use.
    """
    if t < 1:
        raise ConfigError("Adam step counter t must be >= 1")
    mode = mode.lower()
    if mode not in ("adam", "adamw"):
        raise ConfigError(f"unknown optimizer mode {mode!r}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m, v = state.get(name, (np.zeros_like(p), np.zeros_like(p)))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatch(f"optimizer state for {name!r} does not match param shape")
        if mode == "adam" and weight_decay:
            g = g + weight_decay * p
        elif mode == "adamw" and weight_decay:
            p *= 1.0 - lr * weight_decay
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_lr(t, total, lr_max, lr_min=0.0):
    if not 0 <= t <= total:
        raise ConfigError(f"schedule step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ----------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    model: object
    loss: str = "l1"
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    lr_min: float = 0.0
    seed: int = 0
    patch: int | None = None  # coarse patch size; None = full images

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", config_from_dict(self.model))
        if not isinstance(self.model, (EdsrConfig, FnoConfig)):
            raise ConfigError("TrainConfig.model must be an EDSR or FNO config")
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.loss not in ad.LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer.lower() not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.patch is not None and int(self.patch) < 1:
            raise ConfigError("patch size must be >= 1")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0
    n_params: int = 0

    @property
    def best_val_rmse(self) -> float:
        return self.val_rmse[self.best_epoch]

    def metrics_rows(self):
        return [
            (e + 1, self.train_loss[e], self.val_rmse[e], self.lr[e]) for e in range(len(self.train_loss))
        ]


def validate_rmse(params: ModelParams, model, pairs: PairSet, standardizer: Standardizer,
                  batch_size: int = 32) -> float:
    """Pixel RMSE in degrees C over all pairs (predictions destandardized)."""
    if len(pairs) == 0:
        raise EmptyTrainSet("validation set is empty")
    pred = predict(model, params, standardizer.standardize(pairs.inputs), batch_size)
    err = standardizer.destandardize(pred) - pairs.targets
    return float(np.sqrt(np.mean(err * err)))


def _crops_per_day(cfg: TrainConfig, shape) -> int:
    if not cfg.patch:
        return 1
    h, w = shape
    return max(1, h // int(cfg.patch)) * max(1, w // int(cfg.patch))


def _sample_patches(rng, x, y, patch, scale):
    _, h, w = x.shape
    if patch >= h and patch >= w:
        return x, y
    ph, pw = min(patch, h), min(patch, w)
    xs, ys = [], []
    for i in range(x.shape[0]):
        r = int(rng.integers(0, h - ph + 1))
        c = int(rng.integers(0, w - pw + 1))
        xs.append(x[i, r : r + ph, c : c + pw])
        ys.append(y[i, r * scale : (r + ph) * scale, c * scale : (c + pw) * scale])
    return np.stack(xs), np.stack(ys)


def train(cfg: TrainConfig, pairs: PairSet, split: SplitSpec, standardizer: Standardizer,
          progress=None):
    """Train from a seeded init; return (best-epoch params, report).

    Batches are drawn from a seeded permutation each epoch; the last partial
    batch is kept. The learning rate is cosine-annealed per epoch. With a
    patch size p an epoch visits every training day (h//p)*(w//p) times, each
    visit a random p x p crop, so an epoch covers about the area of one pass
    over the full images.
    """
    train_set = pairs.subset(split.train)
    val_set = pairs.subset(split.val)
    if len(train_set) == 0:
        raise EmptyTrainSet("no training pairs in the training years")
    if len(val_set) == 0:
        raise EmptyTrainSet("no validation pairs in the validation years")
    model = cfg.model
    scale = model.scale
    if train_set.targets.shape[-1] != train_set.inputs.shape[-1] * scale:
        raise ShapeMismatch(
            f"model scale {scale} does not map inputs {train_set.inputs.shape[1:]} "
            f"to targets {train_set.targets.shape[1:]}"
        )
    # fixed sub-seeds: parameter init and batch order draw from separate streams
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    params = init_params(model, int(init_seed))
    rng = np.random.default_rng(int(shuffle_seed))
    loss_fn = ad.LOSSES[cfg.loss]
    xs = standardizer.standardize(train_set.inputs)
    ys = standardizer.standardize(train_set.targets)
    state = {}
    report = TrainReport(n_params=params.count())
    best = None
    step = 0
    t0 = time.perf_counter()
    crops = _crops_per_day(cfg, xs.shape[1:])
    n = len(train_set) * crops
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size] // crops
            xb, yb = xs[idx], ys[idx]
            if cfg.patch:
                xb, yb = _sample_patches(rng, xb, yb, int(cfg.patch), scale)
            params.zero_grad()
            out = forward(model, params, Tensor(model_input(model, xb)))
            loss = loss_fn(out, yb[:, None])
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise DivergedAtStep(step, value)
            ad.backward(loss)
            adam_step(
                params.arrays(),
                {k: t.grad for k, t in params.tensors.items()},
                state,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
                cfg.weight_decay,
                cfg.optimizer,
                step,
            )
            total += value * len(idx)
            seen += len(idx)
        val = validate_rmse(params, model, val_set, standardizer, cfg.batch_size)
        report.train_loss.append(total / seen)
        report.val_rmse.append(val)
        report.lr.append(lr)
        if best is None or val < report.val_rmse[report.best_epoch]:
            report.best_epoch = epoch
            best = params.copy()
        if progress is not None:
            progress(epoch, total / seen, val)
    report.wall_time = time.perf_counter() - t0
    return best, report


def sweep(configs, pairs: PairSet, split: SplitSpec, standardizer: Standardizer, budget=None):
    """Train every config and rank by validation RMSE.

    ``budget`` optionally caps the epochs of each run. Ties break on fewer
    parameters, then on position in ``configs``.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep needs at least one config")
    results = []
    for pos, cfg in enumerate(configs):
        if budget is not None:
            cfg = TrainConfig(**{**cfg.__dict__, "epochs": min(cfg.epochs, int(budget))})
        params, report = train(cfg, pairs, split, standardizer)
        results.append((report.best_val_rmse, report.n_params, pos, cfg, params, report))
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    return [(cfg, params, report) for _, _, _, cfg, params, report in results]


# ----------------------------------------------------------------------------
# run directories


def write_run(run_dir, snapshot: dict, params: ModelParams, report: TrainReport) -> None:
    """config.json (exact config used), metrics.csv, best.prm."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_rmse", "lr"])
        for epoch, loss, val, lr in report.metrics_rows():
            writer.writerow([epoch, repr(loss), repr(val), repr(lr)])
    save_params(params, run_dir / "best.prm")
