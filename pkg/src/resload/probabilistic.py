"""Predictive uncertainty and probabilistic scoring.

Total predictive variance per hour splits into two parts: the model-knowledge
term, approximated by the spread of stochastic dropout forward passes through
a single dropout-trained network, and the inherent-noise term sigma^2,
estimated per hour from squared validation residuals of the point ensemble
and scaled by a calibration factor beta.  Intervals are Gaussian:
half-width = z * sqrt(model_var + sigma2).

All variances here live in the same (normalized) units as the model outputs;
callers working in raw load units scale point and half-width by the load
normalization constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import erf, sqrt
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .data import DataError, DayBatch, DayInput, day_batch, HOURS_PER_DAY
from .model import ForecastModel
from .training import EnsembleBundle, ensemble_predict

DEFAULT_TAUS = tuple(round(t / 100, 2) for t in range(1, 100))
Z_SCORES = (1.000, 1.280, 1.645, 1.960)
DEFAULT_BETA_GRID = tuple(round(0.50 + 0.01 * i, 2) for i in range(101))


@dataclass
class UncertaintyModel:
    dropout_p: float = 0.1
    mc_samples: int = 100
    beta: float = 1.0
    sigma2_per_hour: np.ndarray = field(default_factory=lambda: np.zeros(HOURS_PER_DAY))
    variance_model: Optional[dict] = None  # parameter dict of the dropout-trained network

    def __post_init__(self):
        self.sigma2_per_hour = np.asarray(self.sigma2_per_hour, dtype=np.float64)
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.sigma2_per_hour.shape != (HOURS_PER_DAY,) or np.any(self.sigma2_per_hour < 0):
            raise ValueError("sigma2_per_hour must be 24 nonnegative values")


@dataclass
class PredictionInterval:
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    z: float
    level: float


def mc_dropout_samples(model: ForecastModel, day: Union[DayInput, DayBatch],
                       m_samples: int, p: float, seed: int = 0) -> np.ndarray:
    """M stochastic forward passes with fresh dropout masks.

    Returns (M, 24) for a single day, (M, n, 24) for a batch.  Pass m draws
    its masks from a generator seeded with (seed, m), so samples are
    reproducible and independent of evaluation order.
    """
    if m_samples < 2:
        raise ValueError("m_samples must be >= 2")
    single = isinstance(day, DayInput)
    batch = day_batch([day]) if single else day
    out = np.empty((m_samples, batch.n, HOURS_PER_DAY))
    for m in range(m_samples):
        if p == 0.0:
            yhat = model.predict_day(batch)
        else:
            yhat, _ = model.forward_day(batch, dropout_p=p,
                                        rng=np.random.default_rng([seed, m]),
                                        need_cache=False)
        out[m] = yhat
    return out[:, 0, :] if single else out


def model_variance(samples: np.ndarray) -> np.ndarray:
    """Per-hour spread of the MC samples, divisor M (population form)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return samples.var(axis=0, ddof=0)


def estimate_sigma2(bundle: EnsembleBundle, val_batch: DayBatch, beta: float = 1.0) -> np.ndarray:
    """Per-hour inherent noise: beta times the mean squared validation
    residual of the ensemble point forecast."""
    if val_batch.n == 0:
        raise DataError("empty validation set")
    if beta <= 0:
        raise ValueError("beta must be positive")
    resid = val_batch.target - ensemble_predict(bundle, val_batch)
    return beta * np.mean(resid ** 2, axis=0)


def calibrate_beta(bundle: EnsembleBundle, variance_model: ForecastModel,
                   val_batch: DayBatch, grid: Sequence[float] = DEFAULT_BETA_GRID,
                   p: float = 0.1, mc_samples: int = 100, seed: int = 0) -> float:
    """Pick the grid beta whose 90% and 95% validation intervals come closest
    to nominal (sum of absolute coverage gaps at z = 1.645 and 1.960).
    Ties go to the smaller beta."""
    grid = list(grid)
    if not grid or any(b <= 0 for b in grid):
        raise ValueError("grid must be non-empty positive values")
    point = ensemble_predict(bundle, val_batch)
    mvar = model_variance(mc_dropout_samples(variance_model, val_batch, mc_samples, p, seed))
    base = estimate_sigma2(bundle, val_batch, beta=1.0)
    best_beta, best_obj = None, np.inf
    for beta in sorted(grid):
        std = np.sqrt(mvar + beta * base)
        obj = 0.0
        for z, nominal in ((1.645, 0.90), (1.960, 0.95)):
            cov = empirical_coverage(point - z * std, point + z * std, val_batch.target)
            obj += abs(cov - nominal)
        if obj < best_obj:
            best_beta, best_obj = beta, obj
    return float(best_beta)


def fit_uncertainty(bundle: EnsembleBundle, variance_model: ForecastModel,
                    val_batch: DayBatch, dropout_p: float = 0.1,
                    mc_samples: int = 100, grid: Sequence[float] = DEFAULT_BETA_GRID,
                    seed: int = 0) -> UncertaintyModel:
    beta = calibrate_beta(bundle, variance_model, val_batch, grid,
                          p=dropout_p, mc_samples=mc_samples, seed=seed)
    return UncertaintyModel(
        dropout_p=dropout_p,
        mc_samples=mc_samples,
        beta=beta,
        sigma2_per_hour=estimate_sigma2(bundle, val_batch, beta),
        variance_model=variance_model.params_copy(),
    )


def predictive_interval(point, model_var, sigma2, z: float) -> PredictionInterval:
    point = np.asarray(point, dtype=np.float64)
    model_var = np.asarray(model_var, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if z <= 0:
        raise ValueError("z must be positive")
    if np.any(model_var < 0) or np.any(sigma2 < 0):
        raise ValueError("variances must be nonnegative")
    half = z * np.sqrt(model_var + sigma2)
    half = np.broadcast_to(half, point.shape)
    level = erf(z / sqrt(2.0))  # two-sided Gaussian mass within +-z
    return PredictionInterval(point, point - half, point + half, float(z), level)


def empirical_coverage(lower, upper, actual) -> float:
    """Fraction of values falling inside [lower, upper], bounds inclusive."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if not lower.shape == upper.shape == actual.shape:
        raise ValueError("lower, upper, actual must share a shape")
    return float(np.mean((actual >= lower) & (actual <= upper)))


def gaussian_quantiles(point, total_var, taus: Sequence[float] = DEFAULT_TAUS) -> np.ndarray:
    """Quantile curves of the Gaussian predictive distribution; shape
    point.shape + (len(taus),)."""
    point = np.asarray(point, dtype=np.float64)
    total_var = np.broadcast_to(np.asarray(total_var, dtype=np.float64), point.shape)
    if np.any(total_var < 0):
        raise ValueError("variance must be nonnegative")
    zs = norm.ppf(np.asarray(taus, dtype=np.float64))
    return point[..., None] + np.sqrt(total_var)[..., None] * zs


def pinball_loss(quantiles: np.ndarray, actual: np.ndarray,
                 taus: Sequence[float] = DEFAULT_TAUS) -> float:
    """Mean quantile-weighted absolute error over all observations and all
    tau levels: tau*(y-q) when y >= q, else (1-tau)*(q-y)."""
    quantiles = np.asarray(quantiles, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    taus_arr = np.asarray(taus, dtype=np.float64)
    if quantiles.shape != actual.shape + taus_arr.shape:
        raise ValueError("quantiles must have shape actual.shape + (len(taus),)")
    diff = actual[..., None] - quantiles
    return float(np.mean(np.where(diff >= 0, taus_arr * diff, (taus_arr - 1.0) * diff)))


def winkler_score(lower, upper, actual, level: float) -> np.ndarray:
    """Per-observation interval score: width, plus (2/alpha) times the
    distance by which the actual escapes the interval (alpha = 1 - level)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    alpha = 1.0 - level
    score = upper - lower
    score = score + np.where(actual < lower, 2.0 / alpha * (lower - actual), 0.0)
    score = score + np.where(actual > upper, 2.0 / alpha * (actual - upper), 0.0)
    return score
