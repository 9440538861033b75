"""Optimization: MSE loss, Adam with decoupled weight decay, seeded
mini-batch training with early stopping, and hyperparameter grid search.

Every random choice (parameter init, dropout, per-epoch shuffles) derives
from the run seed through separate named streams, so a run is reproducible
bit for bit.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import NormStats
from .errors import ConfigError, DataError, DimensionError, DivergenceError, GradientError
from .evaluation import evaluate
from .model import SEFNet, SefnetConfig
from .tensor import ComputeTape, DiffArray, mean_all, mul, sub

__all__ = [
    "AdamState",
    "GridResult",
    "RunConfig",
    "TrainReport",
    "adam_step",
    "decay_exempt",
    "grid_search",
    "mse_loss",
    "train",
]


@dataclass
class RunConfig:
    model: SefnetConfig
    lr: float = 0.001
    weight_decay: float = 5e-4
    batch: int = 128
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    norm: str = "per-region"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError(
                f"batch, max_epochs and patience must be >= 1, got "
                f"{self.batch}, {self.max_epochs}, {self.patience}"
            )

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "lr", "weight_decay", "batch", "max_epochs", "patience", "seed", "norm")}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = SefnetConfig.from_dict(d.pop("model"))
        return cls(model=model, **d)


def mse_loss(pred: DiffArray, target) -> DiffArray:
    """Mean squared error over every (sample, region) entry."""
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ConfigError("cannot average a loss over an empty batch")
    diff = sub(pred, DiffArray(target))
    return mean_all(mul(diff, diff))


def decay_exempt(name: str) -> bool:
    """Fusion gates, normalization scale/shift, and biases keep their
    magnitude; decaying them fights their role."""
    if name.startswith("fusion."):
        return True
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b_") or leaf in ("scale", "shift", "bias")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.values) for k, p in params.items()},
            v={k: np.zeros_like(p.values) for k, p in params.items()},
        )


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              exempt=decay_exempt) -> None:
    """One bias-corrected Adam update; weight decay is decoupled (applied to
    the parameter directly, before the moment update)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"missing gradient for parameter {name}")
        g = p.grad
        if weight_decay and not exempt(name):
            p.values = p.values - lr * weight_decay * p.values
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = ""
    epochs_run: int = 0
    wall_time: float = 0.0
    test: dict | None = None

    def to_dict(self) -> dict:
        # wall time varies between runs; keep serialized reports reproducible
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "epochs_run": self.epochs_run,
            "test": self.test,
        }


def _stack(samples):
    return np.stack([s.input for s in samples]), np.stack([s.target for s in samples])


def _batch_eval_loss(model: SEFNet, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    total = 0.0
    for lo in range(0, len(x), batch):
        xb, yb = x[lo : lo + batch], y[lo : lo + batch]
        pred = model.forward(xb, training=False).values
        total += float(((pred - yb) ** 2).sum())
    return total / y.size


def train(run: RunConfig, windows: dict, stats: NormStats | None = None,
          regions=None) -> tuple[SEFNet, TrainReport]:
    """Fit a model on windowed samples; early-stop on validation loss.

    Returns the model restored to its best-validation epoch. When stats are
    given and a test split exists, the report carries denormalized test
    metrics computed with that best model.
    """
    if not windows.get("train"):
        raise DataError("training split is empty; series too short for this protocol")
    if not windows.get("val"):
        raise DataError("validation split is empty; series too short for this protocol")
    model = SEFNet(run.model, seed=run.seed)
    state = AdamState.create(model.params)
    x_train, y_train = _stack(windows["train"])
    x_val, y_val = _stack(windows["val"])
    report = TrainReport()
    started = time.perf_counter()
    best_snapshot = None
    stall = 0
    for epoch in range(1, run.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([run.seed, 2, epoch])
        ).permutation(len(x_train))
        epoch_sq = 0.0
        for lo in range(0, len(order), run.batch):
            idx = order[lo : lo + run.batch]
            with ComputeTape() as tape:
                pred = model.forward(x_train[idx], training=True)
                loss = mse_loss(pred, y_train[idx])
            value = float(loss)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"loss is not finite at epoch {epoch} with lr {run.lr}"
                )
            tape.backward(loss)
            adam_step(model.params, state, run.lr, run.weight_decay)
            for p in model.params.values():
                p.zero_grad()
            epoch_sq += value * pred.size
        report.train_loss.append(epoch_sq / y_train.size)
        val = _batch_eval_loss(model, x_val, y_val, run.batch)
        if not np.isfinite(val):
            raise DivergenceError(
                f"validation loss is not finite at epoch {epoch} with lr {run.lr}"
            )
        report.val_loss.append(val)
        report.epochs_run = epoch
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best_snapshot = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= run.patience:
                report.stop_reason = (
                    f"no validation improvement for {run.patience} epochs"
                )
                break
    if not report.stop_reason:
        report.stop_reason = f"reached max_epochs {run.max_epochs}"
    model.restore(best_snapshot)
    report.wall_time = time.perf_counter() - started
    if stats is not None and windows.get("test"):
        result = evaluate(
            model.predict, windows["test"], stats, regions=regions,
            horizon=run.model.horizon,
        )
        report.test = result.to_dict()
    return model, report


# fields of RunConfig a grid may sweep directly; everything else belongs to
# the architecture config
_RUN_FIELDS = ("lr", "weight_decay", "batch", "max_epochs", "patience")


@dataclass
class GridResult:
    best_run: RunConfig
    best_model: SEFNet
    best_report: TrainReport
    rows: list

    @property
    def failures(self) -> int:
        return sum(1 for r in self.rows if r["status"] != "ok")


def _apply_combo(base: RunConfig, combo: dict) -> RunConfig:
    run_kw = {k: v for k, v in combo.items() if k in _RUN_FIELDS}
    model_kw = {k: v for k, v in combo.items() if k not in _RUN_FIELDS}
    model = replace(base.model, **model_kw) if model_kw else base.model
    return replace(base, model=model, **run_kw)


def grid_search(base: RunConfig, grid: dict, windows: dict,
                stats: NormStats | None = None, regions=None) -> GridResult:
    """Train every combination in the grid; keep the best validation loss.

    Ties break toward fewer parameters, then lower learning rate. Failed
    combinations are recorded in rows and do not abort the sweep.
    """
    if not grid:
        raise ConfigError("grid must name at least one hyperparameter")
    keys = sorted(grid)
    for k in keys:
        if not grid[k]:
            raise ConfigError(f"grid entry {k!r} lists no values")
    rows = []
    best = None  # (val_loss, n_params, lr, index)
    for combo_values in itertools.product(*(grid[k] for k in keys)):
        combo = dict(zip(keys, combo_values))
        row = {"combo": combo, "status": "ok", "val_loss": None,
               "best_epoch": None, "n_params": None}
        try:
            run = _apply_combo(base, combo)
            model, rep = train(run, windows, stats=stats, regions=regions)
        except (ConfigError, DataError, DivergenceError) as exc:
            row["status"] = f"failed: {exc}"
            rows.append(row)
            continue
        n_params = sum(p.size for p in model.params.values())
        row.update(val_loss=rep.best_val_loss, best_epoch=rep.best_epoch,
                   n_params=n_params)
        rows.append(row)
        key = (rep.best_val_loss, n_params, run.lr)
        if best is None or key < best[0]:
            best = (key, run, model, rep)
    if best is None:
        raise DivergenceError("every grid combination failed; see rows for causes")
    return GridResult(best_run=best[1], best_model=best[2], best_report=best[3], rows=rows)
