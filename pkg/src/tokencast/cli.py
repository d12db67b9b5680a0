"""Command-line front end: train, eval, forecast, ablate, sweep-n, synth.

Exit codes: 0 success, 2 configuration errors (including metric settings),
3 data and checkpoint file errors, 4 numeric failures during training.

Every RunConfig key is exposed three ways with identical meaning: a line in
an INI config file (--config), a --set key=value override, and a direct
--key-name flag. Precedence is preset < file < override, with --set and
direct flags sharing the override level (direct flags win).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import pretrain_then_freeze
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    PRESETS,
    VARIANTS,
    ConfigError,
    RunConfig,
    build_config,
    load_config_file,
    parse_override,
)
from .data import (
    DataError,
    MultivariateSeries,
    WindowSet,
    chronological_split,
    few_shot_subset,
    load_csv,
    split_spec_for,
    synth_generate,
    write_series_csv,
)
from .metrics import MetricError, build_report, seasonality_for
from .model import Forecaster
from .training import (
    NumericError,
    TrainConfig,
    evaluate_mse,
    naive_repeat_last_mse,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ------------------------------------------------------------ data plumbing


def standardize_by_train(series: MultivariateSeries, train_len: int) -> MultivariateSeries:
    """Shift and scale every channel by its training-split statistics."""
    if train_len < 2:
        raise DataError("global standardization needs at least 2 training rows")
    head = series.values[:train_len]
    mu = head.mean(axis=0)
    sd = np.maximum(head.std(axis=0), 1e-8)
    return MultivariateSeries(
        name=series.name,
        values=(series.values - mu) / sd,
        frequency=series.frequency,
        channel_names=list(series.channel_names),
        meta={**series.meta, "standardized": True},
    )


def prepare_data(cfg: RunConfig):
    """Series plus (train, val, test) views and window sets for a config."""
    if cfg.data_kind == "synthetic":
        series = synth_generate(cfg.synthetic, cfg.channels, cfg.length, cfg.seed,
                                noise=cfg.noise, frequency=cfg.frequency)
    else:
        series = load_csv(cfg.csv_path, date_column=cfg.date_column or None,
                          name=cfg.dataset_name or None, frequency=cfg.frequency)
    test_frac = 1.0 - cfg.train_frac - cfg.val_frac
    if test_frac < -1e-9:
        raise ConfigError(
            f"train_frac + val_frac = {cfg.train_frac + cfg.val_frac} exceeds 1"
        )
    spec = split_spec_for(series.length, (cfg.train_frac, cfg.val_frac, max(test_frac, 0.0)))
    if cfg.global_standardize:
        series = standardize_by_train(series, spec.train_len)
    views = chronological_split(series, spec, cfg.lookback)
    train_view, val_view, test_view = views
    if cfg.few_shot < 1.0:
        train_view = few_shot_subset(train_view, cfg.few_shot, cfg.lookback, cfg.horizon)
    make = lambda v: WindowSet(v, cfg.lookback, cfg.horizon, cfg.stride)
    return series, (train_view, val_view, test_view), (
        make(train_view), make(val_view), make(test_view),
    )


def build_model(cfg: RunConfig, train_view) -> Forecaster:
    model = Forecaster(cfg)
    if cfg.pretrain_mode == "pretrain_then_freeze":
        pretrain_then_freeze(model.backbone, train_view, cfg.lookback, cfg.horizon,
                             steps=cfg.pretrain_steps, seed=cfg.seed)
    return model


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        epochs=cfg.epochs, lambda_lb=cfg.lambda_lb, loss_kind=cfg.loss_kind,
        seed=cfg.seed, patience=cfg.patience, clip_norm=cfg.clip_norm,
    )


def routing_payload(model: Forecaster, windows) -> dict:
    if not model.uses_routers or windows.count < 1:
        return {"routed": False, "variant": model.variant}
    stats = model.collect_routing_stats(windows)
    payload = stats.to_json_dict()
    payload["routed"] = True
    payload["variant"] = model.variant
    return payload


def predict_blocks(model: Forecaster, windows, batch_size: int = 64):
    """Stacked (windows, channels, horizon) truths, predictions, lookbacks."""
    if windows.count < 1:
        raise DataError("no evaluation windows; split is too short")
    xs, ys, ps = [], [], []
    for lo in range(0, windows.count, batch_size):
        idx = np.arange(lo, min(lo + batch_size, windows.count))
        batch = windows.batch(idx)
        xs.append(batch.x)
        ys.append(batch.y)
        ps.append(model.predict(batch.x))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ps)


def seasonal_naive_blocks(x: np.ndarray, s: int, horizon: int) -> np.ndarray | None:
    """Vectorized seasonal-naive forecasts, or None when lookback < s."""
    lookback = x.shape[2]
    if lookback < s:
        return None
    h = np.arange(horizon)
    return x[:, :, lookback - s + (h % s)]


# ------------------------------------------------------------------- verbs


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, views, (train_ws, val_ws, test_ws) = prepare_data(cfg)
    model = build_model(cfg, views[0])
    result = train(model, train_ws, val_ws if val_ws.count else None, train_config(cfg))

    save_checkpoint(out / "checkpoint.ckpt", model,
                    step=result.steps_run, prng_state=result.rng_state)
    write_history_csv(result, out / "history.csv", layers=model.layer_count())
    _write_json(out / "routing_stats.json", routing_payload(model, train_ws))

    last = result.history[-1]
    print(f"trained {result.epochs_run} epochs ({result.steps_run} steps), "
          f"final train loss {last['train_loss']:.6f}")
    if result.best_val is not None:
        stopped = " (early stop)" if result.stopped_early else ""
        print(f"best val mse {result.best_val:.6f} at epoch {result.best_epoch}{stopped}")
    if test_ws.count:
        test_mse = evaluate_mse(model, test_ws)
        naive = naive_repeat_last_mse(test_ws)
        print(f"test mse {test_mse:.6f} vs repeat-last naive {naive:.6f}")
    print(f"wrote {out / 'checkpoint.ckpt'}, {out / 'history.csv'}, "
          f"{out / 'routing_stats.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    overrides = collect_overrides(args)
    cfg = build_config(dataclasses.asdict(model.cfg), overrides)
    for dim_key in ("lookback", "horizon"):
        if getattr(cfg, dim_key) != getattr(model.cfg, dim_key):
            raise ConfigError(
                f"{dim_key} mismatch: checkpoint was trained with "
                f"{dim_key}={getattr(model.cfg, dim_key)}, dataset asks for "
                f"{getattr(cfg, dim_key)}"
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series, views, (_, _, test_ws) = prepare_data(cfg)
    x, y_true, y_pred = predict_blocks(model, test_ws)

    s = seasonality_for(cfg.frequency)
    naive_pred = seasonal_naive_blocks(x, s, cfg.horizon)
    insample = views[0].array if args.mase_convention == "m4" else None
    report = build_report(
        y_true, y_pred, seasonality=s, channel_names=series.channel_names,
        naive_pred=naive_pred, mase_convention=args.mase_convention,
        insample=insample,
    )
    _write_json(out / "metrics.json", report.to_json_dict())
    table = report.to_text_table()
    (out / "metrics.txt").write_text(table + "\n")
    _write_json(out / "routing_stats.json", routing_payload(model, test_ws))
    print(table)
    print(f"wrote {out / 'metrics.json'}, {out / 'metrics.txt'}, "
          f"{out / 'routing_stats.json'}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    series = load_csv(args.input, date_column=args.date_column or None)
    lookback = model.cfg.lookback
    if series.length < lookback:
        raise DataError(
            f"forecast needs at least {lookback} rows of history, "
            f"got {series.length}"
        )
    x = series.values[-lookback:].T[None, :, :]
    pred = model.predict(x)[0]  # (channels, horizon)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + list(series.channel_names))
        for h in range(pred.shape[1]):
            writer.writerow([h + 1] + [repr(float(v)) for v in pred[:, h]])
    print(f"wrote {out_path} ({pred.shape[1]} steps x {pred.shape[0]} channels)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, views, (train_ws, val_ws, test_ws) = prepare_data(cfg)

    rows = []
    checksums = set()
    for variant in VARIANTS:
        vcfg = dataclasses.replace(cfg, variant=variant).validate()
        model = build_model(vcfg, views[0])
        checksums.add(model.backbone.checksum())
        result = train(model, train_ws, val_ws if val_ws.count else None,
                       train_config(vcfg))
        report = model.parameter_report()
        if model.uses_routers and test_ws.count:
            entropy = float(np.mean(model.collect_routing_stats(test_ws).entropy_bits()))
        else:
            entropy = 0.0  # constant gates carry no selection variability
        rows.append({
            "variant": variant,
            "test_mse": evaluate_mse(model, test_ws) if test_ws.count else float("nan"),
            "best_val_mse": result.best_val if result.best_val is not None else float("nan"),
            "trainable_params": report["trainable"],
            "adapter_params": report["adapters"],
            "routing_entropy_bits": entropy,
        })
    if len(checksums) != 1:
        raise RuntimeError("shared trunk initialization diverged across variants")

    path = out / "ablate.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    if test_ws.count:
        print(f"repeat-last naive test mse: {naive_repeat_last_mse(test_ws):.6f}")
    header = f"{'variant':18}{'test_mse':>12}{'val_mse':>12}{'trainable':>12}{'adapters':>10}{'entropy':>10}"
    print(header)
    for r in rows:
        print(f"{r['variant']:18}{r['test_mse']:>12.6f}{r['best_val_mse']:>12.6f}"
              f"{r['trainable_params']:>12}{r['adapter_params']:>10}"
              f"{r['routing_entropy_bits']:>10.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep_n(args) -> int:
    cfg = config_from_args(args)
    if cfg.variant not in ("full", "v1_no_align", "v2_prefix_prompt"):
        raise ConfigError(
            f"sweep-n requires a routed variant, got '{cfg.variant}'"
        )
    n_values = parse_n_values(args.n_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, views, (train_ws, val_ws, test_ws) = prepare_data(cfg)

    rows = []
    for n in n_values:
        ncfg = dataclasses.replace(cfg, n_active=n).validate()
        model = build_model(ncfg, views[0])
        train(model, train_ws, val_ws if val_ws.count else None, train_config(ncfg))
        stats = model.collect_routing_stats(test_ws if test_ws.count else train_ws)
        payload = stats.to_json_dict()
        payload["n_active"] = n
        _write_json(out / f"routing_n{n}.json", payload)
        rows.append({
            "n_active": n,
            "test_mse": evaluate_mse(model, test_ws) if test_ws.count else float("nan"),
            "mean_entropy_bits": float(np.mean(stats.entropy_bits())),
        })
    path = out / "sweep_n.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"n={r['n_active']}  test_mse={r['test_mse']:.6f}  "
              f"entropy={r['mean_entropy_bits']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    series = synth_generate(args.kind, args.channels, args.length, args.seed,
                            noise=args.noise, frequency=args.frequency)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_series_csv(series, out_path)
    print(f"wrote {out_path} ({series.length} rows x {series.channels} channels)")
    return EXIT_OK


# --------------------------------------------------------------- arg wiring


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="INI config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting point")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override any config key (repeatable)")
    for f in dataclasses.fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                       default=None, metavar="V", help=argparse.SUPPRESS)


def collect_overrides(args) -> dict:
    overrides = {}
    for item in getattr(args, "set", []) or []:
        key, value = parse_override(item)
        overrides[key] = value
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    return overrides


def config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else None
    return build_config(file_values, collect_overrides(args), args.preset)


def parse_n_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--n-values must be comma-separated integers, got '{text}'")
    if not values or not all(1 <= v <= 7 for v in values):
        raise ConfigError(f"--n-values entries must lie in [1, 7], got {values}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencast",
        description="Train and evaluate the channel-as-token forecaster.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="fit a model, write checkpoint + history")
    add_config_flags(p)
    p.add_argument("--out", default="tokencast_out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mase-convention", choices=["window", "m4"], default="window")
    add_config_flags(p)
    p.add_argument("--out", default="tokencast_out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="predict beyond the end of a lookback CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV with at least lookback rows")
    p.add_argument("--output", default="forecast.csv")
    p.add_argument("--date-column", default="")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("ablate", help="compare all five variants on shared data")
    add_config_flags(p)
    p.add_argument("--out", default="tokencast_out", help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-n", help="sweep the active-adapter count")
    add_config_flags(p)
    p.add_argument("--n-values", default="1,2,3,4,5,6,7")
    p.add_argument("--out", default="tokencast_out", help="output directory")
    p.set_defaults(func=cmd_sweep_n)

    p = sub.add_parser("synth", help="generate a synthetic series CSV + sidecar")
    p.add_argument("--kind", default="sine_mixture")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--frequency", default="hourly")
    p.add_argument("--output", default="synth.csv")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MetricError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        if e.diagnostics:
            print(json.dumps(e.diagnostics, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
