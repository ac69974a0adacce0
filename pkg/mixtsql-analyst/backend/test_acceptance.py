"""
Monte Carlo acceptance checks of estimation, testing, diagnostics and
forecasting on simulated data. These take minutes.
Run: pytest -m slow test_acceptance.py
"""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from app.diagnostics_service import ccf, pit, pit_uniformity_test
from app.estimation_service import fit_qmle
from app.families import FamilyKind, family
from app.forecast_service import gaussian_baseline, osa_forecast
from app.models import ParamVector, validate_spec
from app.simulation_service import bounded_count_spec, configuration, simulate_trajectory
from app.study_service import McStudyConfig, run_mc_study

pytestmark = pytest.mark.slow

C1_TRUTH = {
    "beta1_0": 1.0, "beta1_l1": 0.2, "gamma1_l1": -0.2,
    "beta2_0": 1.0, "beta2_l1": 0.2, "gamma2_l1": -0.2,
}


def overdispersed_c1():
    """C1 means with double-Poisson counts at phi2 = 2"""
    c1 = configuration("C1")
    theta = c1.theta.with_dispersions(c1.theta.phi1, 2.0)
    return c1.spec, theta, (family(FamilyKind.BETA), family(FamilyKind.DOUBLE_POISSON))


def weekly_reduced_model():
    """Sparse lag structure of a weekly bounded/count pair: own {1, 2, 5, 6}; own {2} and cross {6}"""
    spec = bounded_count_spec(
        own_lags_1=(1, 2, 5, 6), cross_lags_1=(), own_lags_2=(2,), cross_lags_2=(6,)
    )
    theta = ParamVector(
        beta1=(0.0, 0.3, 0.15, 0.1, 0.1), beta2=(1.0, 0.3), gamma2=(-0.8,), phi1=0.1, phi2=2.0
    )
    return spec, theta, (family(FamilyKind.BETA), family(FamilyKind.DOUBLE_POISSON))


def test_estimator_is_calibrated_under_c1():
    cfg = McStudyConfig.from_configuration(configuration("C1"), n=100, reps=500, base_seed=1000)
    report = run_mc_study(cfg)
    assert report.failed <= 0.05 * report.reps
    summary = report.summary.set_index("parameter")
    for name, truth in C1_TRUTH.items():
        assert summary.loc[name, "true"] == truth
        assert abs(summary.loc[name, "bias"]) <= 0.05, name
        assert 0.85 <= summary.loc[name, "se_ratio"] <= 1.15, name


def test_bootstrap_agrees_with_sandwich_se():
    cfg = McStudyConfig.from_configuration(
        configuration("C1"), n=100, reps=100, base_seed=2000, bootstrap_B=100
    )
    summary = run_mc_study(cfg).summary.set_index("parameter")
    for name in C1_TRUTH:
        assert 0.85 <= summary.loc[name, "median_boot_theory_ratio"] <= 1.15, name


def test_cross_effects_detected_under_c2():
    cfg = McStudyConfig.from_configuration(configuration("C2"), n=100, reps=500, base_seed=3000)
    summary = run_mc_study(cfg).summary.set_index("parameter")
    assert len(summary) == 2 * (1 + 1 + 10)
    assert 0.70 <= summary.loc["gamma1_l1", "detection_theory"] <= 0.90
    assert 0.35 <= summary.loc["gamma1_l4", "detection_theory"] <= 0.65


def test_se_calibration_survives_misspecified_generator():
    cfg = McStudyConfig.from_configuration(configuration("C3"), n=100, reps=200, base_seed=4000)
    summary = run_mc_study(cfg).summary.set_index("parameter")
    for name in C1_TRUTH:
        assert 0.8 <= summary.loc[name, "se_ratio"] <= 1.2, name


def test_granger_test_has_nominal_size():
    cfg = McStudyConfig.from_configuration(
        configuration("C1", gamma2_zero=True), n=100, reps=500, base_seed=5000, qlr_direction="1->2"
    )
    qlr = run_mc_study(cfg).qlr_summary
    assert qlr["df"] == 1
    assert 0.03 <= qlr["rejection_rate_5pct"] <= 0.08
    assert abs(qlr["mean_qlr"] - 1.0) <= 0.15


@pytest.mark.parametrize(
    "name, lag, expected",
    [("C1", 1, -0.30), ("C1", -1, -0.17), ("C2", 1, -0.35), ("C2", 4, 0.16)],
)
def test_long_run_cross_correlations(name, lag, expected):
    config = configuration(name)
    series = simulate_trajectory(
        config.spec, config.theta, config.families, 100_000, rng=np.random.default_rng(6000)
    )
    values = ccf(series.values(1), series.values(2), 10)
    assert values[lag] == pytest.approx(expected, abs=0.03)


def test_pit_separates_double_poisson_from_poisson():
    spec, theta, families = overdispersed_c1()
    dp_pass, poisson_fail = 0, 0
    for r in range(100):
        series = simulate_trajectory(spec, theta, families, 500, rng=np.random.default_rng(7000 + r))
        fit = fit_qmle(validate_spec(spec, series), compute_covariance=False)
        _, p_dp = pit_uniformity_test(pit(fit, 2, family(FamilyKind.DOUBLE_POISSON)))
        _, p_poisson = pit_uniformity_test(pit(fit, 2, family(FamilyKind.POISSON)))
        dp_pass += p_dp > 0.01
        poisson_fail += p_poisson <= 0.01
    assert dp_pass >= 90
    assert poisson_fail >= 90


def test_forecast_intervals_cover_and_beat_gaussian_baseline():
    spec, theta, families = weekly_reduced_model()
    covered, steps = 0, 0
    squared_q, squared_g = 0.0, 0.0
    for r in range(5):
        series = simulate_trajectory(spec, theta, families, 112, rng=np.random.default_rng(8000 + r))
        ctx = validate_spec(spec, series)
        assert ctx.m == 6
        run_q = osa_forecast(ctx, 50, margin=2)
        run_g = gaussian_baseline(ctx, 50, margin=2)
        assert len(run_q.points) == len(run_g.points) == 62
        covered += sum(p.covered for p in run_q.points)
        steps += len(run_q.points)
        squared_q += float(np.sum(run_q.errors ** 2))
        squared_g += float(np.sum(run_g.errors ** 2))
    assert steps == 310
    assert 0.90 <= covered / steps <= 0.985
    assert squared_q < squared_g
