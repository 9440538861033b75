"""Denormalized metrics (RMSE, Pearson correlation) and closed-form linear
baselines: per-region autoregression and a cross-region ridge regression.

Baselines consume the same normalized matrices as the network; evaluation
projects predictions and targets back to the real scale first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormStats, SplitSpec, denormalize, make_windows
from .errors import ConfigError, DataError

__all__ = [
    "EvalResult",
    "LinearBaselineParams",
    "evaluate",
    "fit_ar",
    "fit_lridge",
    "persistence",
    "select_lridge",
]

RIDGE_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass
class EvalResult:
    rmse: float
    pcc: float | None
    pcc_defined: bool
    horizon: int | None = None
    per_region: list[dict] | None = None

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "pcc": self.pcc,
            "pcc_defined": self.pcc_defined,
            "horizon": self.horizon,
            "per_region": self.per_region,
        }


def _pearson(a: np.ndarray, b: np.ndarray):
    a = a.ravel()
    b = b.ravel()
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return None
    return float((da * db).sum() / denom)


def evaluate(
    predict,
    samples,
    stats: NormStats,
    regions=None,
    horizon: int | None = None,
    pcc_mode: str = "pooled",
) -> EvalResult:
    """Score a predictor on windowed samples, on the real scale.

    `predict` maps a B×N×T batch of normalized windows to B×N normalized
    forecasts. RMSE pools every (sample, region) pair; so does PCC unless
    pcc_mode is "per-region-mean". A zero-variance side leaves PCC undefined
    and is reported through pcc_defined rather than as NaN.
    """
    if not samples:
        raise DataError("no samples to evaluate")
    if pcc_mode not in ("pooled", "per-region-mean"):
        raise ConfigError(f"pcc_mode must be 'pooled' or 'per-region-mean', got {pcc_mode!r}")
    x = np.stack([s.input for s in samples])
    y = np.stack([s.target for s in samples])
    pred = np.asarray(predict(x), dtype=float)
    if pred.shape != y.shape:
        raise ConfigError(f"predictor returned shape {pred.shape}, expected {y.shape}")
    if not np.isfinite(pred).all():
        raise DataError("predictor produced non-finite values")
    pred_real = denormalize(pred, stats, axis=-1)
    true_real = denormalize(y, stats, axis=-1)
    err = pred_real - true_real
    rmse = float(np.sqrt(np.mean(err * err)))

    n = y.shape[1]
    labels = list(regions) if regions is not None else [str(i) for i in range(n)]
    per_region = []
    for j in range(n):
        r = float(np.sqrt(np.mean(err[:, j] ** 2)))
        per_region.append({"region": labels[j], "rmse": r, "pcc": _pearson(pred_real[:, j], true_real[:, j])})

    if pcc_mode == "pooled":
        pcc = _pearson(pred_real, true_real)
    else:
        defined = [e["pcc"] for e in per_region if e["pcc"] is not None]
        pcc = float(np.mean(defined)) if defined else None
    return EvalResult(
        rmse=rmse,
        pcc=pcc,
        pcc_defined=pcc is not None,
        horizon=horizon,
        per_region=per_region,
    )


def persistence(x) -> np.ndarray:
    """Carry the last observation forward."""
    x = np.asarray(x, dtype=float)
    return x[..., -1]


@dataclass
class LinearBaselineParams:
    """Fitted linear forecaster. For kind "ar", coef[i] holds region i's own
    q lag weights. For kind "lridge", coef[i] spans all N·q lagged inputs
    with column m·N + j meaning lag m of region j."""

    kind: str
    q: int
    horizon: int
    coef: np.ndarray
    intercept: np.ndarray
    lam: float = 0.0

    def predict(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        B, N, T = windows.shape
        if T < self.q:
            raise ConfigError(f"window length {T} shorter than look-back {self.q}")
        lags = np.stack([windows[:, :, T - 1 - m] for m in range(self.q)], axis=-1)
        if self.kind == "ar":
            out = np.einsum("bnq,nq->bn", lags, self.coef) + self.intercept
        else:
            feats = np.transpose(lags, (0, 2, 1)).reshape(B, self.q * N)
            out = feats @ self.coef.T + self.intercept
        return out[0] if single else out


def _lag_design(values: np.ndarray, q: int, h: int):
    """Anchors t = q-1 .. L-h-1 of an N×L matrix -> lag block (S,N,q) with
    entry [.,i,m] = x_i(t-m), and targets (S,N) = x(t+h)."""
    n, length = values.shape
    s = length - q - h + 1
    if s < 1:
        raise DataError(
            f"series of length {length} yields no samples for look-back {q} "
            f"and horizon {h}"
        )
    anchors = np.arange(q - 1, length - h)
    lags = np.stack([values[:, anchors - m] for m in range(q)], axis=-1)  # N×S×q
    lags = np.transpose(lags, (1, 0, 2))
    targets = values[:, anchors + h].T
    return lags, targets


def _ridge_solve(design: np.ndarray, targets: np.ndarray, lam: float):
    """Normal-equation solve with an unpenalized trailing intercept column."""
    s, p = design.shape
    gram = design.T @ design
    penalty = np.eye(p) * lam
    penalty[-1, -1] = 0.0
    try:
        beta = np.linalg.solve(gram + penalty, design.T @ targets)
    except np.linalg.LinAlgError:
        raise DataError(
            "singular normal equations; the lag features are collinear, use a "
            "positive ridge weight"
        ) from None
    return beta


def fit_ar(values, q: int, h: int) -> LinearBaselineParams:
    """Least-squares autoregression per region on an N×L training matrix.

    A tiny ridge (1e-8, intercept exempt) keeps the solve conditioned; the
    fit is OLS for practical purposes.
    """
    values = np.asarray(values, dtype=float)
    if q < 1:
        raise ConfigError(f"look-back must be >= 1, got {q}")
    lags, targets = _lag_design(values, q, h)
    s = lags.shape[0]
    if s < q + 1:
        raise DataError(
            f"underdetermined fit: {s} samples for {q} coefficients plus intercept"
        )
    n = values.shape[0]
    coef = np.empty((n, q))
    intercept = np.empty(n)
    ones = np.ones((s, 1))
    for i in range(n):
        design = np.hstack([lags[:, i, :], ones])
        beta = _ridge_solve(design, targets[:, i], 1e-8)
        coef[i] = beta[:q]
        intercept[i] = beta[q]
    return LinearBaselineParams(kind="ar", q=q, horizon=h, coef=coef, intercept=intercept)


def fit_lridge(values, q: int, h: int, lam: float) -> LinearBaselineParams:
    """Ridge regression from all N regions' q lags jointly to each region's
    future value, solved in closed form on an N×L training matrix."""
    values = np.asarray(values, dtype=float)
    if q < 1:
        raise ConfigError(f"look-back must be >= 1, got {q}")
    if lam < 0:
        raise ConfigError(f"ridge weight must be >= 0, got {lam}")
    lags, targets = _lag_design(values, q, h)
    s = lags.shape[0]
    n = values.shape[0]
    p = n * q
    if s < p + 1:
        raise DataError(
            f"underdetermined fit: {s} samples for {p} coefficients plus intercept"
        )
    feats = np.transpose(lags, (0, 2, 1)).reshape(s, p)
    design = np.hstack([feats, np.ones((s, 1))])
    beta = _ridge_solve(design, targets, lam)  # (p+1)×N
    return LinearBaselineParams(
        kind="lridge", q=q, horizon=h, coef=beta[:p].T, intercept=beta[p], lam=lam
    )


def select_lridge(values, split: SplitSpec, q: int, h: int, stats: NormStats, grid=RIDGE_GRID):
    """Fit on the training span, pick the ridge weight with the lowest
    denormalized validation RMSE. Returns (params, scores-per-lambda)."""
    values = np.asarray(values, dtype=float)
    windows = make_windows(values, q, h, split)
    if not windows["val"]:
        raise DataError("validation split is empty; cannot select a ridge weight")
    train = values[:, : split.train_end]
    best = None
    scores = {}
    for lam in grid:
        params = fit_lridge(train, q, h, lam)
        res = evaluate(params.predict, windows["val"], stats, horizon=h)
        scores[lam] = res.rmse
        if best is None or res.rmse < best[1]:
            best = (params, res.rmse)
    return best[0], scores
