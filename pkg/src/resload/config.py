"""Experiment configuration: a YAML document describing dataset, split
ranges, architecture, training schedule, uncertainty settings, and outputs.

Unknown keys are rejected so that typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .data import (
    DataError,
    DateRange,
    TimeSeriesDataset,
    fit_normalization,
    load_csv,
    synthetic_dataset,
    usable_days,
)
from .model import ModelSpec
from .probabilistic import DEFAULT_BETA_GRID, Z_SCORES
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSource:
    csv: Optional[str] = None
    synthetic_days: Optional[int] = None
    synthetic_seed: int = 0

    def __post_init__(self):
        if (self.csv is None) == (self.synthetic_days is None):
            raise ConfigError("dataset needs exactly one of csv or synthetic")


@dataclass(frozen=True)
class UncertaintySettings:
    dropout_p: float = 0.1
    mc_samples: int = 100
    variance_model_epochs: Optional[int] = None  # defaults to training epochs
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID
    z_scores: Sequence[float] = Z_SCORES

    def __post_init__(self):
        if not 0.0 < self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in (0, 1)")
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be >= 2")
        if self.variance_model_epochs is not None and self.variance_model_epochs < 1:
            raise ConfigError("variance_model_epochs must be >= 1")


@dataclass(frozen=True)
class PerturbSettings:
    stds: Sequence[float] = (1.0, 2.0, 3.0)
    trials: int = 5

    def __post_init__(self):
        if any(s < 0 for s in self.stds) or not self.stds:
            raise ConfigError("perturb stds must be nonnegative and non-empty")
        if self.trials < 1:
            raise ConfigError("perturb trials must be >= 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetSource
    train_range: DateRange
    validation_range: DateRange
    test_range: DateRange
    model: ModelSpec = field(default_factory=ModelSpec)
    epochs: int = 150
    snapshot_epochs: Sequence[int] = ()
    num_inits: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    uncertainty: Optional[UncertaintySettings] = None
    perturb: PerturbSettings = field(default_factory=PerturbSettings)
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if not self.snapshot_epochs:
            self.snapshot_epochs = (self.epochs,)
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)
        for earlier, later, names in (
            (self.train_range, self.validation_range, "train/validation"),
            (self.validation_range, self.test_range, "validation/test"),
        ):
            if earlier.end >= later.start:
                raise ConfigError(f"{names} ranges must be disjoint and in order")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            snapshot_epochs=self.snapshot_epochs,
            model=self.model,
            batch_size=self.batch_size,
            num_inits=self.num_inits,
            seed=self.seed,
            lr=self.lr,
        )

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_canonical(self), sort_keys=True).encode()
        ).hexdigest()


def _canonical(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _canonical(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, (date, datetime)):
        return obj.isoformat()
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    return obj


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _as_date(value, where: str) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    if isinstance(value, str):
        try:
            return date.fromisoformat(value)
        except ValueError:
            pass
    raise ConfigError(f"{where}: expected an ISO date, got {value!r}")


def _parse_range(section, where: str) -> DateRange:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping with start/end")
    _require_keys(section, {"start", "end"}, where)
    try:
        return DateRange(_as_date(section.get("start"), f"{where}.start"),
                         _as_date(section.get("end"), f"{where}.end"))
    except DataError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    _require_keys(raw, {"dataset", "splits", "model", "training", "uncertainty",
                        "perturb", "output_dir", "seed"}, "config")
    for key in ("dataset", "splits"):
        if key not in raw:
            raise ConfigError(f"config is missing required section {key!r}")

    ds = raw["dataset"]
    if not isinstance(ds, dict):
        raise ConfigError("dataset must be a mapping")
    _require_keys(ds, {"csv", "synthetic"}, "dataset")
    if "csv" in ds and "synthetic" in ds:
        raise ConfigError("dataset needs exactly one of csv or synthetic")
    if "csv" in ds:
        csv_path = str(ds["csv"])
        if base_dir is not None and not Path(csv_path).is_absolute():
            csv_path = str(base_dir / csv_path)
        source = DatasetSource(csv=csv_path)
    elif "synthetic" in ds:
        syn = ds["synthetic"] or {}
        _require_keys(syn, {"days", "seed"}, "dataset.synthetic")
        if "days" not in syn:
            raise ConfigError("dataset.synthetic needs days")
        source = DatasetSource(synthetic_days=int(syn["days"]),
                               synthetic_seed=int(syn.get("seed", 0)))
    else:
        raise ConfigError("dataset needs csv or synthetic")

    splits = raw["splits"]
    if not isinstance(splits, dict):
        raise ConfigError("splits must be a mapping")
    _require_keys(splits, {"train", "validation", "test"}, "splits")
    for key in ("train", "validation", "test"):
        if key not in splits:
            raise ConfigError(f"splits is missing {key!r}")

    model_raw = dict(raw.get("model") or {})
    _require_keys(model_raw, set(ModelSpec.__dataclass_fields__), "model")
    try:
        model = ModelSpec(**model_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None

    train_raw = dict(raw.get("training") or {})
    _require_keys(train_raw, {"epochs", "snapshot_epochs", "num_inits", "batch_size", "lr"},
                  "training")

    unc = None
    if raw.get("uncertainty") is not None:
        unc_raw = dict(raw["uncertainty"])
        _require_keys(unc_raw, {"dropout_p", "mc_samples", "variance_model_epochs"},
                      "uncertainty")
        unc = UncertaintySettings(**unc_raw)

    perturb_raw = dict(raw.get("perturb") or {})
    _require_keys(perturb_raw, {"stds", "trials"}, "perturb")
    perturb = PerturbSettings(
        stds=tuple(float(s) for s in perturb_raw.get("stds", (1.0, 2.0, 3.0))),
        trials=int(perturb_raw.get("trials", 5)),
    )

    try:
        return ExperimentConfig(
            dataset=source,
            train_range=_parse_range(splits["train"], "splits.train"),
            validation_range=_parse_range(splits["validation"], "splits.validation"),
            test_range=_parse_range(splits["test"], "splits.test"),
            model=model,
            epochs=int(train_raw.get("epochs", 150)),
            snapshot_epochs=tuple(train_raw.get("snapshot_epochs", ())),
            num_inits=int(train_raw.get("num_inits", 1)),
            batch_size=int(train_raw.get("batch_size", 32)),
            lr=float(train_raw.get("lr", 1e-3)),
            uncertainty=unc,
            perturb=perturb,
            output_dir=str(raw.get("output_dir", "out")),
            seed=int(raw.get("seed", 0)),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_dataset(cfg: ExperimentConfig) -> TimeSeriesDataset:
    if cfg.dataset.csv is not None:
        return load_csv(cfg.dataset.csv)
    return synthetic_dataset(days=cfg.dataset.synthetic_days, seed=cfg.dataset.synthetic_seed)


def prepare_dataset(cfg: ExperimentConfig):
    """Load, range-check, and normalize; returns (dataset, split day lists)."""
    dataset = load_dataset(cfg)
    span_start = dataset.start.date()
    span_end = dataset.end.date()
    for name, rng in (("train", cfg.train_range), ("validation", cfg.validation_range),
                      ("test", cfg.test_range)):
        if rng.start < span_start or rng.end > span_end:
            raise ConfigError(
                f"splits.{name} [{rng.start}..{rng.end}] outside dataset span "
                f"[{span_start}..{span_end}]")
    fit_normalization(dataset, cfg.train_range)
    splits = {}
    for name, rng in (("train", cfg.train_range), ("validation", cfg.validation_range),
                      ("test", cfg.test_range)):
        days = usable_days(dataset, rng, cfg.model.month_lags)
        if not days:
            raise ConfigError(f"splits.{name} has no usable days (not enough lag history?)")
        splits[name] = days
    return dataset, splits
