"""Command-line surface: train, evaluate, ablate, predict.

Runs are reproducible end to end: every random choice derives from one
seed, and the merged configuration that produced a run is echoed verbatim
into the output directory so the run can be repeated from that file alone.

Exit codes: 0 success, 2 usage or configuration problem, 3 data problem,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SplitSpec, load_csv, make_windows, normalize, normalize_with, denormalize, NormStats
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    GradientError,
)
from .evaluation import evaluate
from .model import ABLATIONS, SEFNet, SefnetConfig, ablate, load_checkpoint, save_checkpoint
from .training import RunConfig, grid_search, train

_RUN_KEYS = ("lr", "weight_decay", "batch", "max_epochs", "patience")
_TOP_KEYS = set(_RUN_KEYS) | {"data", "out", "window", "horizon", "norm", "seed", "model", "grid"}
_MODEL_KEYS = {"hidden", "layers", "filters", "pool", "attn_dim", "ar_window", "dropout", "ablation"}

_DEFAULTS = {
    "window": 20,
    "horizon": 3,
    "norm": "per-region",
    "lr": 0.001,
    "weight_decay": 5e-4,
    "batch": 128,
    "max_epochs": 500,
    "patience": 20,
    "model": {},
    "grid": None,
    "data": None,
    "out": None,
}


def _read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(_TOP_KEYS)}")
    model = doc.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("config key 'model' must be an object")
    bad = sorted(set(model) - _MODEL_KEYS)
    if bad:
        raise ConfigError(f"unknown model config keys {bad}; allowed: {sorted(_MODEL_KEYS)}")
    grid = doc.get("grid")
    if grid is not None and not isinstance(grid, dict):
        raise ConfigError("config key 'grid' must be an object of name -> list of values")
    return doc


def _resolve_seed(flag_seed, file_cfg: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("EPIFORECAST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"EPIFORECAST_SEED must be an integer, got {env!r}") from None
    return 0


def _merge_config(args, extra_flags=()) -> dict:
    """File values under CLI flags under defaults; returns the full merged
    dict that the run is a pure function of."""
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = dict(_DEFAULTS)
    cfg.update(file_cfg)
    for name in ("data", "out", "window", "horizon", "norm") + tuple(extra_flags):
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    cfg["seed"] = _resolve_seed(getattr(args, "seed", None), file_cfg)
    if not cfg.get("data"):
        raise ConfigError("no data file given; pass --data or set 'data' in the config")
    return cfg


def _build_run(cfg: dict, n_regions: int) -> RunConfig:
    model_kw = dict(cfg["model"])
    model = SefnetConfig(
        n_regions=n_regions,
        window=int(cfg["window"]),
        horizon=int(cfg["horizon"]),
        **model_kw,
    )
    return RunConfig(
        model=model,
        lr=float(cfg["lr"]),
        weight_decay=float(cfg["weight_decay"]),
        batch=int(cfg["batch"]),
        max_epochs=int(cfg["max_epochs"]),
        patience=int(cfg["patience"]),
        seed=int(cfg["seed"]),
        norm=str(cfg["norm"]),
    )


def _json_dump(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_epochs_csv(path, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, vl) in enumerate(zip(report.train_loss, report.val_loss), start=1):
            writer.writerow([i, repr(tr), repr(vl)])


def _append_results_csv(path, rows) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["dataset", "model", "variant", "horizon", "seed", "rmse", "pcc"])
        for row in rows:
            writer.writerow(row)


def _optimizer_block(run: RunConfig) -> dict:
    return {
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "lr": run.lr,
        "weight_decay": run.weight_decay,
    }


def _prepare(cfg: dict):
    series = load_csv(cfg["data"])
    split = SplitSpec(series.length)
    values, stats = normalize(series, split, mode=cfg["norm"])
    windows = make_windows(values, int(cfg["window"]), int(cfg["horizon"]), split)
    return series, split, values, stats, windows


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    if not cfg.get("out"):
        raise ConfigError("train writes files; pass --out or set 'out' in the config")
    series, split, values, stats, windows = _prepare(cfg)
    run = _build_run(cfg, series.n_regions)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(out / "effective-config.json", cfg)
    grid_rows = None
    if cfg.get("grid"):
        result = grid_search(run, cfg["grid"], windows, stats=stats, regions=series.regions)
        model, report, run = result.best_model, result.best_report, result.best_run
        grid_rows = result.rows
    else:
        model, report = train(run, windows, stats=stats, regions=series.regions)
    save_checkpoint(
        out / "checkpoint.json", model, stats, series.regions,
        extra={"optimizer": _optimizer_block(run), "run": run.to_dict()},
    )
    doc = report.to_dict()
    if grid_rows is not None:
        doc["grid"] = grid_rows
        doc["selected"] = run.to_dict()
    _json_dump(out / "report.json", doc)
    _write_epochs_csv(out / "epochs.csv", report)
    test_line = ""
    if report.test:
        test_line = f", test rmse {report.test['rmse']:.4f}"
    print(
        f"trained {report.epochs_run} epochs in {report.wall_time:.1f}s "
        f"(best epoch {report.best_epoch}, val loss {report.best_val_loss:.6f}"
        f"{test_line}); outputs in {out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    model, stats, ckpt_regions = load_checkpoint(args.checkpoint)
    series = load_csv(args.data)
    if series.n_regions != model.config.n_regions:
        raise ConfigError(
            f"checkpoint expects {model.config.n_regions} regions but "
            f"{args.data} has {series.n_regions}"
        )
    values = normalize_with(series.counts, stats)
    split = SplitSpec(series.length)
    windows = make_windows(values, model.config.window, model.config.horizon, split)
    if not windows["test"]:
        raise DataError("test split is empty; series too short to evaluate")
    result = evaluate(
        model.predict, windows["test"], stats, regions=series.regions,
        horizon=model.config.horizon,
    )
    doc = result.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _json_dump(out / "eval.json", doc)
        seed = _checkpoint_seed(args.checkpoint)
        _append_results_csv(out / "results.csv", [[
            Path(args.data).name, "sefnet", model.config.ablation,
            model.config.horizon, seed, repr(result.rmse),
            repr(result.pcc) if result.pcc is not None else "",
        ]])
        print(f"eval rmse {result.rmse:.4f}; outputs in {out}")
    else:
        print(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def _checkpoint_seed(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh).get("run", {}).get("seed", "")
    except (OSError, json.JSONDecodeError):
        return ""


def _ablate_cell(payload):
    run_dict, windows, stats_dict, regions, dataset, variant, seed = payload
    row = {"dataset": dataset, "variant": variant, "seed": seed,
           "status": "ok", "rmse": None, "pcc": None}
    try:
        run = RunConfig.from_dict(run_dict)
        run = replace(run, model=ablate(run.model, variant), seed=seed)
        stats = NormStats.from_dict(stats_dict)
        _, report = train(run, windows, stats=stats, regions=regions)
        row["rmse"] = report.test["rmse"]
        row["pcc"] = report.test["pcc"]
    except (ConfigError, DataError, DivergenceError) as exc:
        row["status"] = f"failed: {exc}"
    return row


def cmd_ablate(args) -> int:
    cfg = _merge_config(args)
    if not cfg.get("out"):
        raise ConfigError("ablate writes files; pass --out or set 'out' in the config")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("no variants given")
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown variant {v!r}; choose from {ABLATIONS}")
    seeds = []
    for part in args.seeds.split(","):
        part = part.strip()
        if part:
            try:
                seeds.append(int(part))
            except ValueError:
                raise ConfigError(f"seeds must be integers, got {part!r}") from None
    if not seeds:
        raise ConfigError("no seeds given")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")

    series, split, values, stats, windows = _prepare(cfg)
    run = _build_run(cfg, series.n_regions)
    if not windows["test"]:
        raise DataError("test split is empty; series too short to evaluate variants")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    merged = dict(cfg)
    merged["variants"] = variants
    merged["seeds"] = seeds
    _json_dump(out / "effective-config.json", merged)

    dataset = Path(cfg["data"]).name
    payloads = [
        (run.to_dict(), windows, stats.to_dict(), series.regions, dataset, v, s)
        for v in variants
        for s in seeds
    ]
    if args.jobs == 1:
        rows = [_ablate_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablate_cell, payloads))

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "model", "variant", "horizon", "seed", "rmse", "pcc", "status"])
        for row in rows:
            writer.writerow([
                row["dataset"], "sefnet", row["variant"], cfg["horizon"], row["seed"],
                "" if row["rmse"] is None else repr(row["rmse"]),
                "" if row["pcc"] is None else repr(row["pcc"]),
                row["status"],
            ])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "runs", "failures", "rmse_mean", "rmse_sd"])
        for v in variants:
            cells = [r for r in rows if r["variant"] == v]
            good = [r["rmse"] for r in cells if r["status"] == "ok"]
            writer.writerow([
                v, len(cells), len(cells) - len(good),
                repr(float(np.mean(good))) if good else "",
                repr(float(np.std(good))) if good else "",
            ])
    failures = sum(1 for r in rows if r["status"] != "ok")
    print(f"ablation matrix: {len(rows)} cells, {failures} failed; outputs in {out}")
    return 0


def cmd_predict(args) -> int:
    model, stats, _ = load_checkpoint(args.checkpoint)
    series = load_csv(args.data)
    cfg = model.config
    if series.n_regions != cfg.n_regions:
        raise ConfigError(
            f"checkpoint expects {cfg.n_regions} regions but {args.data} "
            f"has {series.n_regions}"
        )
    if series.length < cfg.window:
        raise DataError(
            f"need at least {cfg.window} trailing observations, data has {series.length}"
        )
    window = normalize_with(series.counts, stats)[:, -cfg.window :]
    pred = model.predict(window)
    forecast = denormalize(pred, stats, axis=-1)
    if not np.isfinite(forecast).all():
        raise DivergenceError("forecast contains non-finite values")
    doc = {label: float(v) for label, v in zip(series.regions, forecast)}
    print(json.dumps(doc, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiforecast",
        description="Train and run multi-region epidemic forecasters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write checkpoint + report")
    t.add_argument("--data", help="case-count CSV (header = region labels)")
    t.add_argument("--window", type=int, help="input window length (default 20)")
    t.add_argument("--horizon", type=int, help="steps ahead to predict (default 3)")
    t.add_argument("--config", help="JSON config file; flags override it")
    t.add_argument("--seed", type=int, help="run seed (default: config, then EPIFORECAST_SEED, then 0)")
    t.add_argument("--norm", choices=["per-region", "global"], help="normalization mode")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="output directory; omit to print JSON")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score architecture variants")
    a.add_argument("--data")
    a.add_argument("--window", type=int)
    a.add_argument("--horizon", type=int)
    a.add_argument("--config")
    a.add_argument("--variants", default="none,no-inter,no-intra,no-ar,no-raconv,no-fusion")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    a.add_argument("--norm", choices=["per-region", "global"])
    a.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="forecast from the latest window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--latest", action="store_true",
                   help="forecast from the most recent window (the only mode; flag kept for clarity)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, GradientError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
