"""Multi-region epidemic forecasting with cross-series attention and an
autoregressive residual head."""

from .data import (
    EpidemicSeries,
    NormStats,
    SplitSpec,
    WindowSample,
    denormalize,
    load_csv,
    make_windows,
    normalize,
    normalize_with,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    EpiforecastError,
    GradientError,
)
from .evaluation import (
    EvalResult,
    LinearBaselineParams,
    evaluate,
    fit_ar,
    fit_lridge,
    persistence,
    select_lridge,
)
from .model import SEFNet, SefnetConfig, ablate, load_checkpoint, save_checkpoint
from .tensor import BNState, ComputeTape, DiffArray, backward
from .training import RunConfig, TrainReport, grid_search, mse_loss, train

__all__ = [
    "BNState",
    "ComputeTape",
    "ConfigError",
    "DataError",
    "DiffArray",
    "DimensionError",
    "DivergenceError",
    "EpidemicSeries",
    "EpiforecastError",
    "EvalResult",
    "GradientError",
    "LinearBaselineParams",
    "NormStats",
    "RunConfig",
    "SEFNet",
    "SefnetConfig",
    "SplitSpec",
    "TrainReport",
    "WindowSample",
    "ablate",
    "backward",
    "denormalize",
    "evaluate",
    "fit_ar",
    "fit_lridge",
    "grid_search",
    "load_checkpoint",
    "load_csv",
    "make_windows",
    "mse_loss",
    "normalize",
    "normalize_with",
    "persistence",
    "save_checkpoint",
    "select_lridge",
    "train",
]
