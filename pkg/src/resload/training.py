"""Training: the composite loss, Adam-driven snapshot training, snapshot
ensembles, checkpoint persistence, and MAPE evaluation.

The loss is the mean absolute percentage error over all day/hour cells plus a
daily range penalty: per day, hinge terms for overshooting the actual maximum
and undershooting the actual minimum, each halved and averaged over days.

Checkpoint container (version 1, little-endian):
    bytes 0..3   magic b"RLFC"
    u32          format version
    u32          header length H
    H bytes      UTF-8 JSON header: kind, descriptor, max_load, max_temp,
                 meta, params: [{name, shape}, ...]
    payload      the parameter arrays as raw <f8 C-order bytes, header order
A bundle is a JSON manifest naming one such file per snapshot member.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DataError, DayBatch, TimeSeriesDataset, HOURS_PER_DAY, build_day_batch
from .model import ForecastModel, ModelSpec
from .nn import AdamState, ShapeError, adam_step, gradient_check

CHECKPOINT_MAGIC = b"RLFC"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, init_id: int):
        super().__init__(f"non-finite loss at epoch {epoch} (init {init_id})")
        self.epoch = epoch
        self.init_id = init_id


class CheckpointError(RuntimeError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


# --- loss ----------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    total: float
    error_term: float
    range_term: float


def _check_pair(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.ndim != 2 or yhat.shape != y.shape:
        raise ShapeError(f"forecast {yhat.shape} and actual {y.shape} must be equal (n, H) arrays")
    if np.any(y <= 0):
        raise DataError("actual values must be strictly positive")
    return yhat, y


def loss_error(yhat, y) -> float:
    """Mean absolute percentage error over every day/hour cell (fractional)."""
    yhat, y = _check_pair(yhat, y)
    return float(np.mean(np.abs(yhat - y) / y))


def loss_range(yhat, y) -> float:
    """Daily range penalty: overshoot above the actual max plus undershoot
    below the actual min, halved and averaged over days."""
    yhat, y = _check_pair(yhat, y)
    over = np.maximum(0.0, yhat.max(axis=1) - y.max(axis=1))
    under = np.maximum(0.0, y.min(axis=1) - yhat.min(axis=1))
    return float(np.mean(over + under) / 2.0)


def loss_total(yhat, y) -> LossBreakdown:
    e = loss_error(yhat, y)
    r = loss_range(yhat, y)
    return LossBreakdown(e + r, e, r)


def loss_grad(yhat, y) -> np.ndarray:
    """d loss_total / d yhat (subgradient at kinks, first index at ties)."""
    yhat, y = _check_pair(yhat, y)
    n, h = yhat.shape
    g = np.sign(yhat - y) / (y * (n * h))
    rows = np.arange(n)
    over = yhat.max(axis=1) > y.max(axis=1)
    under = yhat.min(axis=1) < y.min(axis=1)
    g[rows[over], yhat.argmax(axis=1)[over]] += 1.0 / (2 * n)
    g[rows[under], yhat.argmin(axis=1)[under]] -= 1.0 / (2 * n)
    return g


# --- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int
    snapshot_epochs: Sequence[int]
    model: ModelSpec = field(default_factory=ModelSpec)
    batch_size: int = 32
    num_inits: int = 1
    seed: int = 0
    lr: float = 1e-3
    dropout_p: float = 0.0

    def __post_init__(self):
        self.snapshot_epochs = tuple(self.snapshot_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.snapshot_epochs:
            raise ValueError("need at least one snapshot epoch")
        if list(self.snapshot_epochs) != sorted(set(self.snapshot_epochs)):
            raise ValueError("snapshot_epochs must be strictly increasing")
        if self.snapshot_epochs[-1] > self.epochs:
            raise ValueError("snapshot epochs cannot exceed total epochs")
        if self.batch_size < 1 or self.num_inits < 1:
            raise ValueError("batch_size and num_inits must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items()}
        payload["snapshot_epochs"] = list(self.snapshot_epochs)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class EpochStats:
    epoch: int
    train_total: float
    train_error: float
    train_range: float
    val_total: float
    val_error: float
    val_range: float
    seconds: float


@dataclass
class SnapshotMember:
    init_id: int
    epoch: int
    params: dict


@dataclass
class EnsembleBundle:
    members: list
    descriptor: dict
    max_load: float
    max_temp: float
    config_hash: str = ""
    dataset_fingerprint: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")


def train_single(train_batch: DayBatch, val_batch: Optional[DayBatch], cfg: TrainConfig,
                 init_id: int = 0, model: Optional[ForecastModel] = None):
    """Train one initialization; returns (snapshots, per-epoch stats).

    Deterministic given (cfg.seed, init_id): initialization, shuffling, and
    dropout all draw from one generator seeded with that pair.
    """
    if train_batch.target is None:
        raise DataError("training batch has no targets")
    if train_batch.n < cfg.batch_size:
        raise DataError(f"training set ({train_batch.n} days) smaller than one batch ({cfg.batch_size})")
    rng = np.random.default_rng([cfg.seed, init_id])
    if model is None:
        model = ForecastModel(cfg.model, rng=rng)
    params = model.params()
    state = AdamState(lr=cfg.lr)
    snapshot_at = set(cfg.snapshot_epochs)
    snapshots: list[SnapshotMember] = []
    history: list[EpochStats] = []
    n = train_batch.n
    for epoch in range(1, cfg.epochs + 1):
        t0 = _time.perf_counter()
        order = rng.permutation(n)
        tot = err = rng_term = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            sub = train_batch.take(idx)
            yhat, cache = model.forward_day(sub, dropout_p=cfg.dropout_p, rng=rng)
            lb = loss_total(yhat, sub.target)
            if not np.isfinite(lb.total):
                raise DivergenceError(epoch, init_id)
            grads = model.backward_day(cache, loss_grad(yhat, sub.target))
            adam_step(state, params, grads)
            tot += lb.total * len(idx)
            err += lb.error_term * len(idx)
            rng_term += lb.range_term * len(idx)
        if val_batch is not None:
            vb = loss_total(model.predict_day(val_batch), val_batch.target)
        else:
            vb = LossBreakdown(np.nan, np.nan, np.nan)
        history.append(EpochStats(epoch, tot / n, err / n, rng_term / n,
                                  vb.total, vb.error_term, vb.range_term,
                                  _time.perf_counter() - t0))
        if epoch in snapshot_at:
            snapshots.append(SnapshotMember(init_id, epoch, model.params_copy()))
    return snapshots, history


def train_ensemble(train_batch: DayBatch, val_batch: Optional[DayBatch], cfg: TrainConfig,
                   norm_constants: tuple[float, float], dataset_fingerprint: str = "",
                   jobs: int = 1):
    """Snapshot ensemble over cfg.num_inits re-initializations.

    Members are ordered by (init_id, epoch) regardless of scheduling, so the
    result is identical for any jobs count.
    """
    def run(init_id: int):
        return train_single(train_batch, val_batch, cfg, init_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(cfg.num_inits)))
    else:
        results = [run(i) for i in range(cfg.num_inits)]
    members: list[SnapshotMember] = []
    histories: dict[int, list[EpochStats]] = {}
    for init_id, (snaps, history) in enumerate(results):
        members.extend(snaps)
        histories[init_id] = history
    bundle = EnsembleBundle(
        members=members,
        descriptor=cfg.model.descriptor(),
        max_load=float(norm_constants[0]),
        max_temp=float(norm_constants[1]),
        config_hash=cfg.hash(),
        dataset_fingerprint=dataset_fingerprint,
    )
    return bundle, histories


def ensemble_predict(bundle: EnsembleBundle, batch: DayBatch) -> np.ndarray:
    """Unweighted average of the member forecasts, normalized units."""
    model = ForecastModel.from_descriptor(bundle.descriptor)
    acc = np.zeros((batch.n, HOURS_PER_DAY))
    for member in bundle.members:
        model.set_params(member.params)
        acc += model.predict_day(batch)
    return acc / len(bundle.members)


# --- evaluation --------------------------------------------------------------------

@dataclass
class MapeReport:
    overall: float           # percent
    monthly: dict            # "YYYY-MM" -> percent
    n_days: int


def forecast_days(bundle: EnsembleBundle, dataset: TimeSeriesDataset, days: Sequence):
    """Raw-unit ensemble forecasts; returns (days, forecast (n,24), actual (n,24))."""
    batch = build_day_batch(dataset, days, month_lags=bundle.descriptor["month_lags"])
    yhat = ensemble_predict(bundle, batch) * bundle.max_load
    actual = np.stack([dataset.load[dataset.day_slice(d)] for d in days])
    return list(days), yhat, actual


def mape_report(days: Sequence, forecast: np.ndarray, actual: np.ndarray) -> MapeReport:
    ape = np.abs(forecast - actual) / actual * 100.0
    monthly: dict[str, list] = {}
    for i, d in enumerate(days):
        monthly.setdefault(f"{d.year:04d}-{d.month:02d}", []).append(ape[i])
    return MapeReport(
        overall=float(ape.mean()),
        monthly={k: float(np.mean(v)) for k, v in sorted(monthly.items())},
        n_days=len(days),
    )


def evaluate_mape(bundle: EnsembleBundle, dataset: TimeSeriesDataset, days: Sequence) -> MapeReport:
    if not days:
        raise DataError("no evaluation days")
    d, f, a = forecast_days(bundle, dataset, days)
    return mape_report(d, f, a)


def persistence_mape(dataset: TimeSeriesDataset, days: Sequence) -> float:
    """Same-hour-last-week baseline, percent MAPE in raw units."""
    if not days:
        raise DataError("no evaluation days")
    apes = []
    for d in days:
        sl = dataset.day_slice(d)
        actual = dataset.load[sl]
        week_ago = dataset.load[sl.start - 7 * HOURS_PER_DAY:sl.stop - 7 * HOURS_PER_DAY]
        apes.append(np.abs(week_ago - actual) / actual)
    return float(np.mean(apes) * 100.0)


def gradient_check_model(model: ForecastModel, batch: DayBatch, eps: float = 1e-6) -> float:
    """Central-difference check of the full composite loss over every parameter."""
    params = model.params()

    def loss_fn() -> float:
        yhat = model.predict_day(batch)
        return loss_total(yhat, batch.target).total

    yhat, cache = model.forward_day(batch)
    analytic = model.backward_day(cache, loss_grad(yhat, batch.target))
    return gradient_check(loss_fn, params, analytic, eps=eps)


# --- checkpoints ----------------------------------------------------------------------

def _write_container(path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 12 + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad header: {exc}") from None
    return header, raw[12 + hlen:]


@dataclass
class CheckpointData:
    params: dict
    descriptor: dict
    max_load: float
    max_temp: float
    meta: dict


def save_checkpoint(obj, path, *, descriptor: Optional[dict] = None,
                    norm_constants: Optional[tuple] = None, meta: Optional[dict] = None) -> None:
    """Persist a parameter dict (with descriptor/norm_constants) or a whole
    EnsembleBundle (path then names the manifest)."""
    if isinstance(obj, EnsembleBundle):
        save_bundle(obj, path)
        return
    if descriptor is None or norm_constants is None:
        raise ValueError("saving raw params requires descriptor and norm_constants")
    names = list(obj)
    header = {
        "kind": "model",
        "descriptor": descriptor,
        "max_load": float(norm_constants[0]),
        "max_temp": float(norm_constants[1]),
        "meta": meta or {},
        "params": [{"name": k, "shape": list(obj[k].shape)} for k in names],
    }
    _write_container(path, header, [obj[k] for k in names])


def load_checkpoint(path, expect_descriptor: Optional[dict] = None) -> CheckpointData:
    header, payload = _read_container(path)
    if header.get("kind") != "model":
        raise CorruptCheckpointError(f"{path}: kind {header.get('kind')!r} is not a model checkpoint")
    if expect_descriptor is not None and header["descriptor"] != expect_descriptor:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint architecture {header['descriptor']} does not match {expect_descriptor}")
    params: dict = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CorruptCheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)  # writable native copy
        offset += nbytes
    if offset != len(payload):
        raise CorruptCheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return CheckpointData(params, header["descriptor"], header["max_load"],
                          header["max_temp"], header.get("meta", {}))


def save_bundle(bundle: EnsembleBundle, manifest_path, member_dir=None) -> None:
    manifest_path = Path(manifest_path)
    member_dir = Path(member_dir) if member_dir else manifest_path.parent / "checkpoints"
    member_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for member in bundle.members:
        fname = f"member_i{member.init_id:02d}_e{member.epoch:04d}.ckpt"
        fpath = member_dir / fname
        save_checkpoint(member.params, fpath, descriptor=bundle.descriptor,
                        norm_constants=(bundle.max_load, bundle.max_temp),
                        meta={"init_id": member.init_id, "epoch": member.epoch})
        entries.append({
            "init_id": member.init_id,
            "epoch": member.epoch,
            "file": str(fpath.relative_to(manifest_path.parent)),
        })
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "bundle",
        "descriptor": bundle.descriptor,
        "max_load": bundle.max_load,
        "max_temp": bundle.max_temp,
        "config_hash": bundle.config_hash,
        "dataset_fingerprint": bundle.dataset_fingerprint,
        "members": entries,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_bundle(manifest_path) -> EnsembleBundle:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{manifest_path}: {exc}") from None
    if manifest.get("kind") != "bundle":
        raise CorruptCheckpointError(f"{manifest_path}: not a bundle manifest")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{manifest_path}: unsupported format version")
    descriptor = manifest["descriptor"]
    members = []
    for entry in manifest["members"]:
        data = load_checkpoint(manifest_path.parent / entry["file"], expect_descriptor=descriptor)
        members.append(SnapshotMember(entry["init_id"], entry["epoch"], data.params))
    return EnsembleBundle(
        members=members,
        descriptor=descriptor,
        max_load=manifest["max_load"],
        max_temp=manifest["max_temp"],
        config_hash=manifest.get("config_hash", ""),
        dataset_fingerprint=manifest.get("dataset_fingerprint", ""),
    )
