import numpy as np
import pytest
from scipy.stats import norm

from resload.data import DataError, build_day_input
from resload.model import ForecastModel, ModelSpec
from resload.probabilistic import (
    DEFAULT_BETA_GRID,
    DEFAULT_TAUS,
    UncertaintyModel,
    calibrate_beta,
    empirical_coverage,
    estimate_sigma2,
    fit_uncertainty,
    gaussian_quantiles,
    mc_dropout_samples,
    model_variance,
    pinball_loss,
    predictive_interval,
    winkler_score,
)
from resload.training import EnsembleBundle, SnapshotMember, ensemble_predict

SMALL_SPEC = ModelSpec(residual_stage="none", share_weights=True)


@pytest.fixture(scope="module")
def vm_model():
    return ForecastModel(SMALL_SPEC, rng=np.random.default_rng(50))


@pytest.fixture(scope="module")
def small_bundle():
    members = [SnapshotMember(i, 1, ForecastModel(SMALL_SPEC, rng=np.random.default_rng(60 + i)).params_copy())
               for i in range(2)]
    return EnsembleBundle(members=members, descriptor=SMALL_SPEC.descriptor(),
                          max_load=1000.0, max_temp=104.0)


# --- MC dropout sampling ---------------------------------------------------------

def test_mc_samples_shapes(vm_model, ds250, days40):
    from resload.data import build_day_batch

    day = build_day_input(ds250, days40[0])
    single = mc_dropout_samples(vm_model, day, m_samples=4, p=0.2, seed=1)
    assert single.shape == (4, 24)
    batch = build_day_batch(ds250, days40[:3], 6)
    many = mc_dropout_samples(vm_model, batch, m_samples=4, p=0.2, seed=1)
    assert many.shape == (4, 3, 24)
    # the single-day view and the batch agree sample by sample
    assert np.array_equal(single, mc_dropout_samples(vm_model, batch.take(np.arange(1)),
                                                     4, 0.2, seed=1)[:, 0, :])


def test_mc_samples_p_zero_collapses(vm_model, batch40):
    sub = batch40.take(np.arange(2))
    samples = mc_dropout_samples(vm_model, sub, m_samples=5, p=0.0, seed=0)
    for m in range(1, 5):
        assert np.array_equal(samples[m], samples[0])
    assert np.array_equal(samples[0], vm_model.predict_day(sub))
    # identical rows, so only mean-rounding dust can remain
    assert np.all(model_variance(samples) < 1e-30)


def test_mc_samples_deterministic_and_spread(vm_model, batch40):
    sub = batch40.take(np.arange(2))
    a = mc_dropout_samples(vm_model, sub, m_samples=6, p=0.3, seed=7)
    b = mc_dropout_samples(vm_model, sub, m_samples=6, p=0.3, seed=7)
    c = mc_dropout_samples(vm_model, sub, m_samples=6, p=0.3, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a[0], a[1])
    mv = model_variance(a)
    assert np.all(mv >= 0.0) and mv.mean() > 0.0


def test_mc_samples_prefix_stable(vm_model, batch40):
    # per-pass seeding means the first M samples don't depend on m_samples
    sub = batch40.take(np.arange(1))
    few = mc_dropout_samples(vm_model, sub, m_samples=3, p=0.2, seed=4)
    more = mc_dropout_samples(vm_model, sub, m_samples=5, p=0.2, seed=4)
    assert np.array_equal(few, more[:3])


def test_mc_samples_requires_two(vm_model, batch40):
    with pytest.raises(ValueError):
        mc_dropout_samples(vm_model, batch40, m_samples=1, p=0.1)


# --- variance pieces --------------------------------------------------------------

def test_model_variance_hand_case():
    samples = np.array([[0.0], [2.0]])
    assert model_variance(samples) == pytest.approx([1.0])  # divisor M, not M-1
    with pytest.raises(ValueError):
        model_variance(samples[:1])


def test_model_variance_brute_force():
    rng = np.random.default_rng(70)
    samples = rng.normal(size=(7, 3, 24))
    got = model_variance(samples)
    mean = samples.mean(axis=0)
    expected = np.zeros((3, 24))
    for m in range(7):
        expected += (samples[m] - mean) ** 2
    expected /= 7
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_estimate_sigma2_matches_manual(small_bundle, batch40):
    sub = batch40.take(np.arange(5))
    got = estimate_sigma2(small_bundle, sub, beta=1.0)
    resid = sub.target - ensemble_predict(small_bundle, sub)
    assert got == pytest.approx((resid ** 2).mean(axis=0), rel=1e-12)
    assert got.shape == (24,)
    assert np.all(got >= 0.0)
    # beta scales linearly
    assert estimate_sigma2(small_bundle, sub, beta=0.5) == pytest.approx(0.5 * got, rel=1e-12)


def test_estimate_sigma2_guards(small_bundle, batch40):
    with pytest.raises(DataError):
        estimate_sigma2(small_bundle, batch40.take(np.arange(0)))
    with pytest.raises(ValueError):
        estimate_sigma2(small_bundle, batch40.take(np.arange(2)), beta=0.0)


# --- beta calibration --------------------------------------------------------------

def test_calibrate_beta_degenerate_grid(small_bundle, vm_model, batch40):
    sub = batch40.take(np.arange(3))
    assert calibrate_beta(small_bundle, vm_model, sub, grid=[0.7],
                          mc_samples=3, seed=0) == 0.7


def test_calibrate_beta_grid_guards(small_bundle, vm_model, batch40):
    sub = batch40.take(np.arange(2))
    with pytest.raises(ValueError):
        calibrate_beta(small_bundle, vm_model, sub, grid=[])
    with pytest.raises(ValueError):
        calibrate_beta(small_bundle, vm_model, sub, grid=[0.5, -1.0])


def test_calibrate_beta_tie_takes_smallest(small_bundle, vm_model, batch40):
    # with one validation day sigma2 equals that day's squared residual, so
    # z=1.645 intervals cover every hour for any beta >= 0.5 and the coverage
    # objective is flat across the grid
    one = batch40.take(np.arange(1))
    assert calibrate_beta(small_bundle, vm_model, one, grid=[0.83, 0.6, 1.2],
                          mc_samples=3, seed=0) == 0.6
    assert calibrate_beta(small_bundle, vm_model, one, grid=DEFAULT_BETA_GRID,
                          mc_samples=3, seed=0) == 0.5


def test_fit_uncertainty_end_to_end(small_bundle, vm_model, batch40):
    sub = batch40.take(np.arange(4))
    unc = fit_uncertainty(small_bundle, vm_model, sub, dropout_p=0.2,
                          mc_samples=3, grid=[0.8, 1.0], seed=0)
    assert unc.beta in (0.8, 1.0)
    assert unc.dropout_p == 0.2 and unc.mc_samples == 3
    assert unc.sigma2_per_hour == pytest.approx(
        estimate_sigma2(small_bundle, sub, unc.beta), rel=1e-12)
    ref = vm_model.params_copy()
    for k in ref:
        assert np.array_equal(unc.variance_model[k], ref[k])
    unc.variance_model["basic.h00.out.b"][...] = 9.0  # stored params are a copy
    assert vm_model.params()["basic.h00.out.b"][0] != 9.0


def test_uncertainty_model_validation():
    with pytest.raises(ValueError):
        UncertaintyModel(mc_samples=1)
    with pytest.raises(ValueError):
        UncertaintyModel(beta=0.0)
    with pytest.raises(ValueError):
        UncertaintyModel(sigma2_per_hour=np.zeros(23))
    with pytest.raises(ValueError):
        UncertaintyModel(sigma2_per_hour=np.full(24, -1.0))


# --- intervals ---------------------------------------------------------------------

def test_predictive_interval_hand_case():
    iv = predictive_interval(np.zeros(1), np.array([0.02]), np.array([0.02]), z=1.96)
    assert iv.upper[0] == pytest.approx(0.392, rel=1e-12)
    assert iv.lower[0] == pytest.approx(-0.392, rel=1e-12)
    assert iv.level == pytest.approx(0.95, abs=1e-3)


def test_predictive_interval_degenerate_and_ordering():
    point = np.array([3.0, 4.0])
    iv = predictive_interval(point, np.zeros(2), np.zeros(2), z=2.0)
    assert np.array_equal(iv.lower, point) and np.array_equal(iv.upper, point)
    rng = np.random.default_rng(80)
    iv2 = predictive_interval(rng.normal(size=8), rng.uniform(0, 1, 8),
                              rng.uniform(0, 1, 8), z=1.0)
    assert np.all(iv2.lower <= iv2.point) and np.all(iv2.point <= iv2.upper)


def test_predictive_interval_width_scales_with_z():
    point = np.zeros(4)
    var = np.array([0.1, 0.2, 0.3, 0.4])
    w1 = predictive_interval(point, var, np.zeros(4), z=1.0).upper
    w2 = predictive_interval(point, var, np.zeros(4), z=2.0).upper
    assert np.array_equal(w2, 2.0 * w1)


def test_predictive_interval_levels_match_gaussian_mass():
    for z, lo, hi in ((1.000, 0.682, 0.684), (1.645, 0.899, 0.901), (1.960, 0.949, 0.951)):
        level = predictive_interval(np.zeros(1), np.ones(1), np.zeros(1), z=z).level
        assert lo < level < hi
        assert level == pytest.approx(norm.cdf(z) - norm.cdf(-z), abs=1e-12)


def test_predictive_interval_broadcasts_per_hour_variance():
    point = np.arange(48.0).reshape(2, 24)
    mvar = np.linspace(0.01, 0.02, 24)
    sigma2 = np.linspace(0.005, 0.01, 24)
    iv = predictive_interval(point, mvar, sigma2, z=1.645)
    half = iv.upper - iv.point
    assert half.shape == (2, 24)
    assert half[0] == pytest.approx(half[1], rel=1e-12)
    assert half[0] == pytest.approx(1.645 * np.sqrt(mvar + sigma2), rel=1e-12)


def test_predictive_interval_guards():
    with pytest.raises(ValueError):
        predictive_interval(np.zeros(2), np.zeros(2), np.zeros(2), z=0.0)
    with pytest.raises(ValueError):
        predictive_interval(np.zeros(2), np.array([-0.1, 0.0]), np.zeros(2), z=1.0)
    with pytest.raises(ValueError):
        predictive_interval(np.zeros(2), np.zeros(2), np.array([0.0, -1e-9]), z=1.0)


def test_interval_variance_monotonicity():
    point = np.zeros(24)
    base = predictive_interval(point, np.full(24, 0.1), np.full(24, 0.1), z=1.645)
    wider_m = predictive_interval(point, np.full(24, 0.2), np.full(24, 0.1), z=1.645)
    wider_s = predictive_interval(point, np.full(24, 0.1), np.full(24, 0.2), z=1.645)
    assert np.all(wider_m.upper > base.upper)
    assert np.all(wider_s.upper > base.upper)


# --- coverage ----------------------------------------------------------------------

def test_coverage_all_inside_and_inclusive():
    actual = np.array([1.0, 2.0, 3.0])
    assert empirical_coverage(actual - 1, actual + 1, actual) == 1.0
    assert empirical_coverage(actual, actual, actual) == 1.0  # bounds inclusive
    assert empirical_coverage(actual + 0.1, actual + 1, actual) == 0.0


def test_coverage_counting_oracle():
    rng = np.random.default_rng(90)
    for _ in range(50):
        actual = rng.normal(size=(4, 24))
        lower = actual + rng.normal(scale=1.0, size=(4, 24)) - 0.5
        upper = lower + rng.uniform(0.1, 2.0, size=(4, 24))
        count = 0
        for i in range(4):
            for j in range(24):
                if lower[i, j] <= actual[i, j] <= upper[i, j]:
                    count += 1
        assert empirical_coverage(lower, upper, actual) == pytest.approx(count / 96, abs=1e-15)


def test_coverage_monotone_in_z():
    rng = np.random.default_rng(91)
    point = rng.normal(size=(10, 24))
    actual = point + rng.normal(scale=0.8, size=(10, 24))
    var = rng.uniform(0.1, 1.0, size=24)
    covs = []
    for z in (1.000, 1.280, 1.645, 1.960):
        iv = predictive_interval(point, var, np.zeros(24), z=z)
        covs.append(empirical_coverage(iv.lower, iv.upper, actual))
    assert covs == sorted(covs)


def test_coverage_shape_guard():
    with pytest.raises(ValueError):
        empirical_coverage(np.zeros(3), np.zeros(4), np.zeros(3))


# --- quantiles and scores ------------------------------------------------------------

def test_gaussian_quantiles_shapes_and_median():
    point = np.arange(12.0).reshape(2, 6)
    var = np.full(6, 4.0)
    q = gaussian_quantiles(point, var, DEFAULT_TAUS)
    assert q.shape == (2, 6, 99)
    assert q[..., 49] == pytest.approx(point, abs=1e-12)  # tau = 0.50
    assert np.all(np.diff(q, axis=-1) > 0)
    assert q[0, 0, :] == pytest.approx(point[0, 0] + 2.0 * norm.ppf(DEFAULT_TAUS), rel=1e-12)


def test_gaussian_quantiles_zero_variance():
    point = np.array([5.0, 6.0])
    q = gaussian_quantiles(point, np.zeros(2), (0.25, 0.5, 0.75))
    assert np.array_equal(q, np.repeat(point[:, None], 3, axis=1))
    with pytest.raises(ValueError):
        gaussian_quantiles(point, np.array([1.0, -1.0]))


def test_pinball_hand_case():
    q = np.array([[10.0]])     # one observation, one tau
    y = np.array([14.0])
    assert pinball_loss(q, y, taus=(0.5,)) == pytest.approx(2.0, rel=1e-12)
    assert pinball_loss(np.array([[14.0]]), y, taus=(0.5,)) == 0.0


def test_pinball_collapsed_distribution_is_zero():
    actual = np.array([[100.0, 200.0]])
    q = np.repeat(actual[..., None], 99, axis=-1)
    assert pinball_loss(q, actual, DEFAULT_TAUS) == 0.0


def test_pinball_brute_force():
    rng = np.random.default_rng(92)
    taus = (0.1, 0.5, 0.9)
    actual = rng.normal(size=(3, 4))
    quantiles = rng.normal(size=(3, 4, 3))
    total = 0.0
    for i in range(3):
        for j in range(4):
            for t, tau in enumerate(taus):
                d = actual[i, j] - quantiles[i, j, t]
                total += tau * d if d >= 0 else (tau - 1.0) * d
    expected = total / (3 * 4 * 3)
    assert pinball_loss(quantiles, actual, taus) == pytest.approx(expected, rel=1e-12)


def test_pinball_median_is_half_absolute_error():
    rng = np.random.default_rng(93)
    point = rng.normal(size=(5, 24))
    actual = point + rng.normal(size=(5, 24))
    q = gaussian_quantiles(point, np.full(24, 2.0), taus=(0.5,))
    expected = 0.5 * np.mean(np.abs(actual - point))
    assert pinball_loss(q, actual, taus=(0.5,)) == pytest.approx(expected, rel=1e-10)


def test_pinball_shape_guard():
    with pytest.raises(ValueError):
        pinball_loss(np.zeros((2, 3)), np.zeros(2), taus=(0.5,))


def test_winkler_inside_is_width():
    lower = np.array([0.0, 10.0])
    upper = np.array([4.0, 30.0])
    actual = np.array([2.0, 10.0])  # the bound itself counts as inside
    assert winkler_score(lower, upper, actual, 0.9) == pytest.approx([4.0, 20.0], abs=1e-15)


def test_winkler_hand_case():
    # width 10, actual 3 below the lower bound, 90% level
    score = winkler_score(np.array([10.0]), np.array([20.0]), np.array([7.0]), 0.9)
    assert score[0] == pytest.approx(70.0, rel=1e-12)


def test_winkler_brute_force():
    rng = np.random.default_rng(94)
    lower = rng.normal(size=40)
    upper = lower + rng.uniform(0.5, 3.0, size=40)
    actual = rng.normal(size=40) * 2
    level = 0.5
    got = winkler_score(lower, upper, actual, level)
    for i in range(40):
        exp = upper[i] - lower[i]
        if actual[i] < lower[i]:
            exp += 2.0 / (1 - level) * (lower[i] - actual[i])
        elif actual[i] > upper[i]:
            exp += 2.0 / (1 - level) * (actual[i] - upper[i])
        assert got[i] == pytest.approx(exp, rel=1e-12)


def test_winkler_level_guard():
    one = np.ones(1)
    for level in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            winkler_score(one, one, one, level)
