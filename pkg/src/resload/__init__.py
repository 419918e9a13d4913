"""Day-ahead hourly load forecasting with residual dense networks.

Layers of the package, bottom to top:

* :mod:`resload.data` — hourly series ingestion, calendar encoding, and
  per-hour feature assembly.
* :mod:`resload.nn` — dense layers, activations, dropout, Adam, and a
  finite-difference gradient checker; plain NumPy, float64.
* :mod:`resload.model` — the 24-subnet day-ahead structure plus the two
  residual refinement stages.
* :mod:`resload.training` — composite loss, snapshot-ensemble training,
  checkpoints, and MAPE evaluation.
* :mod:`resload.probabilistic` — Monte-Carlo dropout intervals and the
  probabilistic scoring suite.
* :mod:`resload.config` / :mod:`resload.cli` — YAML experiment configs and
  the ``resload`` command-line entry point.
"""

from .data import (
    CalendarCode,
    DataError,
    DataGapError,
    DateRange,
    DayBatch,
    DayInput,
    HistoryError,
    HourInput,
    OrderingError,
    ParseError,
    TimeSeriesDataset,
    build_day_batch,
    build_day_input,
    build_hour_input,
    calendar_code,
    earliest_forecast_day,
    fit_normalization,
    load_csv,
    perturb_temperature,
    synthetic_dataset,
    usable_days,
    write_csv,
)
from .model import ForecastModel, ModelSpec
from .nn import AdamState, DenseLayer, ShapeError, adam_step, gradient_check
from .training import (
    ArchitectureMismatchError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DivergenceError,
    EnsembleBundle,
    LossBreakdown,
    MapeReport,
    SnapshotMember,
    TrainConfig,
    ensemble_predict,
    evaluate_mape,
    gradient_check_model,
    load_bundle,
    load_checkpoint,
    loss_error,
    loss_grad,
    loss_range,
    loss_total,
    persistence_mape,
    save_bundle,
    save_checkpoint,
    train_ensemble,
    train_single,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ArchitectureMismatchError",
    "CalendarCode",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "DataError",
    "DataGapError",
    "DateRange",
    "DayBatch",
    "DayInput",
    "DenseLayer",
    "DivergenceError",
    "EnsembleBundle",
    "ForecastModel",
    "HistoryError",
    "HourInput",
    "LossBreakdown",
    "MapeReport",
    "ModelSpec",
    "OrderingError",
    "ParseError",
    "ShapeError",
    "SnapshotMember",
    "TimeSeriesDataset",
    "TrainConfig",
    "adam_step",
    "build_day_batch",
    "build_day_input",
    "build_hour_input",
    "calendar_code",
    "earliest_forecast_day",
    "ensemble_predict",
    "evaluate_mape",
    "fit_normalization",
    "gradient_check",
    "gradient_check_model",
    "load_bundle",
    "load_checkpoint",
    "load_csv",
    "loss_error",
    "loss_grad",
    "loss_range",
    "loss_total",
    "persistence_mape",
    "perturb_temperature",
    "save_bundle",
    "save_checkpoint",
    "synthetic_dataset",
    "train_ensemble",
    "train_single",
    "usable_days",
    "write_csv",
]
