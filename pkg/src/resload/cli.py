"""Batch command-line front end.

Subcommands: prepare, train, evaluate, perturb-eval, prob-eval.  Every
command takes --config and is deterministic given the config, the seed, and
the input data; reruns produce byte-identical checkpoints, manifests, and
metric files (loss logs carry wall-clock timings and are exempt).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, prepare_dataset
from .data import DataError, TimeSeriesDataset, build_day_batch, earliest_forecast_day, perturb_temperature
from .model import ForecastModel
from .probabilistic import (
    empirical_coverage,
    fit_uncertainty,
    gaussian_quantiles,
    mc_dropout_samples,
    model_variance,
    pinball_loss,
    predictive_interval,
    winkler_score,
)
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    ensemble_predict,
    evaluate_mape,
    forecast_days,
    load_bundle,
    load_checkpoint,
    mape_report,
    persistence_mape,
    save_bundle,
    save_checkpoint,
    train_ensemble,
    train_single,
)

VARIANCE_MODEL_INIT_ID = 10000  # keeps its RNG stream clear of ensemble members


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _hour_timestamps(day) -> list:
    base = datetime(day.year, day.month, day.day)
    return [base + timedelta(hours=k) for k in range(24)]


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    dataset, splits = prepare_dataset(cfg)
    report = {
        "rows": len(dataset),
        "start": dataset.start.isoformat(),
        "end": dataset.end.isoformat(),
        "merged_duplicates": dataset.merged_duplicates,
        "repaired_gaps": len(dataset.repaired_gaps),
        "gap_hours_interpolated": int(sum(n for _, n in dataset.repaired_gaps)),
        "max_load": dataset.max_load,
        "max_temp": dataset.max_temp,
        "earliest_forecast_day": earliest_forecast_day(dataset, cfg.model.month_lags).isoformat(),
        "usable_days": {name: len(days) for name, days in splits.items()},
    }
    print(f"rows: {report['rows']}  span: {report['start']} .. {report['end']}")
    print(f"repaired gaps: {report['repaired_gaps']} "
          f"({report['gap_hours_interpolated']} hours), "
          f"merged duplicates: {report['merged_duplicates']}")
    print(f"max load: {report['max_load']:.3f}  max temp: {report['max_temp']:.3f}")
    print(f"earliest forecastable day: {report['earliest_forecast_day']}")
    for name, count in report["usable_days"].items():
        print(f"usable {name} days: {count}")
    return report


def _write_loss_log(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_total", "train_error", "train_range",
                         "val_total", "val_error", "val_range", "seconds"])
        for st in history:
            writer.writerow([st.epoch, repr(float(st.train_total)), repr(float(st.train_error)),
                             repr(float(st.train_range)), repr(float(st.val_total)),
                             repr(float(st.val_error)), repr(float(st.val_range)),
                             f"{st.seconds:.3f}"])


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    dataset, splits = prepare_dataset(cfg)
    train_batch = build_day_batch(dataset, splits["train"], cfg.model.month_lags)
    val_batch = build_day_batch(dataset, splits["validation"], cfg.model.month_lags)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)

    tcfg = cfg.train_config()
    bundle, histories = train_ensemble(train_batch, val_batch, tcfg,
                                       (dataset.max_load, dataset.max_temp),
                                       dataset_fingerprint=dataset.fingerprint(),
                                       jobs=jobs)
    manifest_path = out / "manifest.json"
    save_bundle(bundle, manifest_path)
    for init_id, history in histories.items():
        _write_loss_log(out / "logs" / f"loss_init{init_id:02d}.csv", history)
        final = history[-1]
        print(f"init {init_id}: epoch {final.epoch} train {final.train_total:.4f} "
              f"val {final.val_total:.4f}")

    report = {
        "manifest": str(manifest_path),
        "members": len(bundle.members),
        "config_hash": bundle.config_hash,
    }

    if cfg.uncertainty is not None:
        unc = cfg.uncertainty
        vm_epochs = unc.variance_model_epochs or cfg.epochs
        vm_cfg = TrainConfig(epochs=vm_epochs, snapshot_epochs=(vm_epochs,),
                             model=cfg.model, batch_size=cfg.batch_size,
                             seed=cfg.seed, lr=cfg.lr, dropout_p=unc.dropout_p)
        snaps, vm_history = train_single(train_batch, val_batch, vm_cfg,
                                         init_id=VARIANCE_MODEL_INIT_ID)
        vm_path = out / "variance_model.ckpt"
        save_checkpoint(snaps[-1].params, vm_path,
                        descriptor=cfg.model.descriptor(),
                        norm_constants=(dataset.max_load, dataset.max_temp),
                        meta={"role": "variance_model", "dropout_p": unc.dropout_p,
                              "epochs": vm_epochs, "init_id": VARIANCE_MODEL_INIT_ID})
        _write_loss_log(out / "logs" / "loss_variance_model.csv", vm_history)
        report["variance_model"] = str(vm_path)
        print(f"variance model: {vm_epochs} epochs at dropout {unc.dropout_p}")

    print(f"wrote {report['members']} member checkpoints + {manifest_path}")
    return report


def _load_bundle_checked(cfg: ExperimentConfig, bundle_path, dataset: TimeSeriesDataset):
    bundle = load_bundle(bundle_path)
    if bundle.descriptor != cfg.model.descriptor():
        raise ConfigError(f"bundle architecture {bundle.descriptor} does not match config")
    if bundle.max_load != dataset.max_load or bundle.max_temp != dataset.max_temp:
        raise ConfigError("bundle normalization constants do not match this dataset/split")
    return bundle


def cmd_evaluate(cfg: ExperimentConfig, bundle_path) -> dict:
    dataset, splits = prepare_dataset(cfg)
    bundle = _load_bundle_checked(cfg, bundle_path, dataset)
    days, forecast, actual = forecast_days(bundle, dataset, splits["test"])
    report = mape_report(days, forecast, actual)
    baseline = persistence_mape(dataset, days)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "overall_mape": report.overall,
        "monthly_mape": report.monthly,
        "n_days": report.n_days,
        "persistence_mape": baseline,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    with open(out / "forecasts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "actual", "forecast"])
        for i, day in enumerate(days):
            for k, ts in enumerate(_hour_timestamps(day)):
                writer.writerow([ts.isoformat(), repr(float(actual[i, k])),
                                 repr(float(forecast[i, k]))])
    print(f"test MAPE: {report.overall:.4f}%  (persistence {baseline:.4f}%) "
          f"over {report.n_days} days")
    return metrics


def cmd_perturb_eval(cfg: ExperimentConfig, bundle_path,
                     stds: Optional[Sequence[float]] = None,
                     trials: Optional[int] = None) -> dict:
    stds = list(stds) if stds is not None else list(cfg.perturb.stds)
    trials = trials if trials is not None else cfg.perturb.trials
    dataset, splits = prepare_dataset(cfg)
    bundle = _load_bundle_checked(cfg, bundle_path, dataset)
    test_days = splits["test"]
    baseline = evaluate_mape(bundle, dataset, test_days).overall

    cases = []
    for case_idx, std_f in enumerate(stds):
        deltas = []
        for trial in range(trials):
            noisy = perturb_temperature(dataset, std_f, seed=[cfg.seed, case_idx, trial])
            mape = evaluate_mape(bundle, noisy, test_days).overall
            deltas.append(mape - baseline)
        deltas_arr = np.asarray(deltas)
        cases.append({
            "std_f": std_f,
            "trials": trials,
            "mean_increase": float(deltas_arr.mean()),
            "std_increase": float(deltas_arr.std(ddof=1)) if trials > 1 else 0.0,
            "increases": [float(d) for d in deltas],
        })
        print(f"std_f={std_f:g}: MAPE increase {cases[-1]['mean_increase']:+.4f}% "
              f"(std {cases[-1]['std_increase']:.4f}%)")

    report = {"baseline_mape": baseline, "cases": cases}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "perturb_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def cmd_prob_eval(cfg: ExperimentConfig, bundle_path, variance_model_path) -> dict:
    if cfg.uncertainty is None:
        raise ConfigError("prob-eval needs an uncertainty section in the config")
    unc = cfg.uncertainty
    dataset, splits = prepare_dataset(cfg)
    bundle = _load_bundle_checked(cfg, bundle_path, dataset)
    ckpt = load_checkpoint(variance_model_path, expect_descriptor=bundle.descriptor)
    vm = ForecastModel.from_descriptor(ckpt.descriptor)
    vm.set_params(ckpt.params)

    val_batch = build_day_batch(dataset, splits["validation"], cfg.model.month_lags)
    test_batch = build_day_batch(dataset, splits["test"], cfg.model.month_lags)

    umodel = fit_uncertainty(bundle, vm, val_batch, dropout_p=unc.dropout_p,
                             mc_samples=unc.mc_samples, grid=unc.beta_grid,
                             seed=cfg.seed)

    # Test-time quantities in raw load units.
    scale = bundle.max_load
    point = ensemble_predict(bundle, test_batch) * scale
    actual = test_batch.target * scale
    mvar = model_variance(mc_dropout_samples(vm, test_batch, unc.mc_samples,
                                             unc.dropout_p, seed=cfg.seed + 1))
    total_var = (mvar + umodel.sigma2_per_hour) * scale ** 2

    coverage_rows = []
    for z in unc.z_scores:
        iv = predictive_interval(point, total_var, np.zeros_like(total_var), z)
        coverage_rows.append({
            "z": float(z),
            "nominal": iv.level,
            "empirical": empirical_coverage(iv.lower, iv.upper, actual),
        })

    quantiles = gaussian_quantiles(point, total_var)
    pinball = pinball_loss(quantiles, actual)
    winkler = {}
    for level, z in ((0.50, 0.6745), (0.90, 1.645)):
        iv = predictive_interval(point, total_var, np.zeros_like(total_var), z)
        winkler[f"{level:.2f}"] = float(np.mean(winkler_score(iv.lower, iv.upper, actual, level)))

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "beta": umodel.beta,
        "coverage": coverage_rows,
        "pinball": pinball,
        "winkler": winkler,
        "mc_samples": unc.mc_samples,
        "dropout_p": unc.dropout_p,
    }
    (out / "prob_metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")

    iv90 = predictive_interval(point, total_var, np.zeros_like(total_var), 1.645)
    with open(out / "intervals.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "point", "lower", "upper", "level"])
        for i, day in enumerate(test_batch.days):
            for k, ts in enumerate(_hour_timestamps(day)):
                writer.writerow([ts.isoformat(), repr(float(point[i, k])),
                                 repr(float(iv90.lower[i, k])), repr(float(iv90.upper[i, k])),
                                 f"{iv90.level:.4f}"])

    print(f"beta: {umodel.beta:.2f}")
    for row in coverage_rows:
        print(f"z={row['z']:.3f}: nominal {row['nominal']*100:.2f}% "
              f"empirical {row['empirical']*100:.2f}%")
    print(f"pinball: {pinball:.4f}  winkler50: {winkler['0.50']:.4f} "
          f"winkler90: {winkler['0.90']:.4f}")
    return metrics


# --- emitted-file readers (round-trip support) -----------------------------------

def read_forecast_csv(path):
    """Returns (timestamps, actual, forecast) from a cmd_evaluate CSV."""
    ts, actual, forecast = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(datetime.fromisoformat(row["timestamp"]))
            actual.append(float(row["actual"]))
            forecast.append(float(row["forecast"]))
    return ts, np.asarray(actual), np.asarray(forecast)


def read_interval_csv(path):
    """Returns (timestamps, point, lower, upper, level) from a prob-eval CSV."""
    ts, point, lower, upper, level = [], [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(datetime.fromisoformat(row["timestamp"]))
            point.append(float(row["point"]))
            lower.append(float(row["lower"]))
            upper.append(float(row["upper"]))
            level.append(float(row["level"]))
    return ts, np.asarray(point), np.asarray(lower), np.asarray(upper), np.asarray(level)


def read_loss_log(path):
    """Returns the per-epoch rows of a training loss log as dicts."""
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resload",
                                     description="Day-ahead load forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("prepare", help="validate and summarize the dataset")
    common(p)

    p = sub.add_parser("train", help="train the snapshot ensemble")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel member training threads")

    p = sub.add_parser("evaluate", help="point-forecast metrics on the test range")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle manifest path")

    p = sub.add_parser("perturb-eval", help="temperature-noise robustness report")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--stds", help="comma-separated noise stds (raw units)")
    p.add_argument("--trials", type=int, help="trials per noise level")

    p = sub.add_parser("prob-eval", help="interval calibration and probabilistic scores")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--variance-model", required=True, help="dropout model checkpoint")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg, jobs=args.jobs)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.bundle)
        elif args.command == "perturb-eval":
            stds = [float(s) for s in args.stds.split(",")] if args.stds else None
            cmd_perturb_eval(cfg, args.bundle, stds=stds, trials=args.trials)
        elif args.command == "prob-eval":
            cmd_prob_eval(cfg, args.bundle, args.variance_model)
    except (ConfigError, DataError, CheckpointError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
