"""
Tests for QMLE fitting, dispersion estimates, sandwich covariance and the bootstrap
Run: pytest test_estimation.py
"""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest
from scipy import optimize

from app.errors import FamilyMismatch, InvalidReplicationCount
from app.estimation_service import (
    bootstrap_se,
    estimate_dispersion,
    fit_qmle,
    sandwich_components,
    sandwich_covariance,
)
from app.families import FamilyKind, family
from app.models import (
    BivariateSeries,
    EquationSpec,
    LinkFunction,
    LinkKind,
    ModelSpec,
    ParamVector,
    SeriesDomain,
    TransformKind,
    VarianceFunction,
    VarianceKind,
    validate_spec,
)
from app.quasi_likelihood import objective_and_gradient, quasi_loglik, score

BETA_POISSON = (family(FamilyKind.BETA), family(FamilyKind.POISSON))


def test_fit_converges_with_small_score(c1_fit):
    assert c1_fit.converged
    grad_norm = c1_fit.convergence.grad_norm
    assert grad_norm <= c1_fit.convergence.tolerance
    value, grad = objective_and_gradient(c1_fit.ctx, c1_fit.coefficients)
    assert np.max(np.abs(grad)) <= 1e-6 * (1.0 + abs(value))


def test_long_fit_recovers_true_parameters(c1, c1_long_fit):
    truth = c1.theta.flatten()
    z = np.abs(c1_long_fit.coefficients - truth) / c1_long_fit.se
    assert (z < 4.0).all(), dict(zip(c1_long_fit.coefficient_names, z))
    assert c1_long_fit.phi1_hat == pytest.approx(0.2, abs=0.03)
    assert c1_long_fit.phi2_hat == pytest.approx(1.0, abs=0.15)


def test_intercept_only_poisson_matches_glm_formulas():
    rng = np.random.default_rng(4)
    n = 500
    y1 = rng.beta(2.0, 3.0, n)
    y2 = rng.poisson(3.0, n).astype(float)
    spec = ModelSpec(
        eq1=EquationSpec(
            link=LinkFunction(kind=LinkKind.LOGIT), variance=VarianceFunction(kind=VarianceKind.BERNOULLI_LIKE)
        ),
        eq2=EquationSpec(
            link=LinkFunction(kind=LinkKind.LOG, transform_kind=TransformKind.LOG_PLUS_ONE),
            variance=VarianceFunction(kind=VarianceKind.LINEAR),
        ),
    )
    data = BivariateSeries(
        y1=tuple(y1), y2=tuple(y2),
        domain1=SeriesDomain.UNIT_INTERVAL, domain2=SeriesDomain.NONNEGATIVE_COUNT,
    )
    fit = fit_qmle(validate_spec(spec, data))
    r1, r2 = y1[1:], y2[1:]
    assert fit.coefficients[0] == pytest.approx(np.log(r1.mean() / (1 - r1.mean())), abs=1e-6)
    assert fit.coefficients[1] == pytest.approx(np.log(r2.mean()), abs=1e-6)
    # sandwich SE of a log-mean: empirical sd / mean / sqrt(n - m)
    expected_se = np.sqrt(np.mean((r2 - r2.mean()) ** 2)) / r2.mean() / np.sqrt(len(r2))
    assert fit.se[1] == pytest.approx(expected_se, rel=1e-5)
    assert fit.phi2_hat == pytest.approx(np.sum((r2 - r2.mean()) ** 2) / np.sum(np.full_like(r2, r2.mean())), rel=1e-6)


def gaussian_intercept_spec():
    eq = EquationSpec(
        link=LinkFunction(kind=LinkKind.IDENTITY), variance=VarianceFunction(kind=VarianceKind.CONSTANT)
    )
    return ModelSpec(eq1=eq, eq2=eq)


def real_series(y1, y2):
    return BivariateSeries(
        y1=tuple(y1), y2=tuple(y2), domain1=SeriesDomain.REAL, domain2=SeriesDomain.REAL
    )


def test_intercept_only_gaussian_sandwich_is_empirical_covariance_of_means():
    rng = np.random.default_rng(8)
    y1 = rng.normal(1.0, 2.0, 300)
    y2 = 0.5 * y1 + rng.normal(-3.0, 1.0, 300)
    fit = fit_qmle(validate_spec(gaussian_intercept_spec(), real_series(y1, y2)))
    e1, e2 = y1[1:] - y1[1:].mean(), y2[1:] - y2[1:].mean()
    n_eff = len(e1)
    assert fit.coefficients == pytest.approx([y1[1:].mean(), y2[1:].mean()], abs=1e-8)
    assert fit.phi1_hat == pytest.approx(np.mean(e1 ** 2), rel=1e-8)
    assert fit.phi2_hat == pytest.approx(np.mean(e2 ** 2), rel=1e-8)
    expected = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]]) / n_eff / n_eff
    assert np.allclose(fit.cov, expected, rtol=1e-6)


def test_noise_free_fit_returns_the_constant_exactly():
    # series 1 is constant, series 2 alternates with residuals 1, -1
    data = real_series([2.5] * 5, [0.0, 1.0, -1.0, 1.0, -1.0])
    fit = fit_qmle(validate_spec(gaussian_intercept_spec(), data))
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(2.5, abs=1e-12)
    assert fit.coefficients[1] == pytest.approx(0.0, abs=1e-12)
    assert fit.phi1_hat == 0.0
    assert fit.phi2_hat == pytest.approx(1.0)
    assert fit.degenerate_dispersion == (True, False)
    assert fit.se[0] == pytest.approx(0.0, abs=1e-12)


def test_dispersion_of_unit_residuals_is_one_and_perfect_fit_is_zero():
    ctx = validate_spec(gaussian_intercept_spec(), real_series([2.5] * 5, [0.0, 1.0, -1.0, 1.0, -1.0]))
    phi1, phi2 = estimate_dispersion(ctx, ParamVector(beta1=(2.5,), beta2=(0.0,)))
    assert phi1 == 0.0
    assert phi2 == 1.0


def test_estimates_do_not_depend_on_the_dispersions(c1_fit):
    ctx, spec = c1_fit.ctx, c1_fit.ctx.spec
    for phi1, phi2 in ((2.0, 3.0), (0.05, 7.0)):
        def fun(x):
            theta = ParamVector.unflatten(spec, x, phi1, phi2)
            return -quasi_loglik(ctx, theta), -score(ctx, theta)

        result = optimize.minimize(
            fun, c1_fit.coefficients + 0.05, jac=True, method="BFGS", options={"gtol": 1e-9}
        )
        assert np.allclose(result.x, c1_fit.coefficients, atol=1e-5)


def test_dispersion_estimate_is_method_of_moments(c1_fit):
    ctx = c1_fit.ctx
    phi1, phi2 = estimate_dispersion(ctx, c1_fit.theta_hat)
    mu1 = c1_fit.mean_path.mu1
    expected = np.sum((ctx.response(1) - mu1) ** 2) / np.sum(mu1 * (1 - mu1))
    assert phi1 == pytest.approx(expected)
    assert phi2 == pytest.approx(c1_fit.phi2_hat)


def test_sandwich_is_symmetric_positive_definite_and_dispersion_free(c1_fit):
    ctx, theta = c1_fit.ctx, c1_fit.theta_hat
    parts = sandwich_components(ctx, theta, (c1_fit.phi1_hat, c1_fit.phi2_hat))
    assert np.allclose(parts.sigma, parts.sigma.T)
    assert np.linalg.eigvalsh(parts.sigma).min() > 0
    assert np.allclose(parts.cov, parts.sigma / ctx.n_eff)
    rescaled = sandwich_covariance(ctx, theta, (2.0 * c1_fit.phi1_hat, 3.0 * c1_fit.phi2_hat))
    assert np.allclose(rescaled, c1_fit.cov, rtol=1e-10)


def test_confidence_intervals_are_estimate_plus_minus_1_96_se(c1_fit):
    half = (c1_fit.ci[:, 1] - c1_fit.ci[:, 0]) / 2
    assert np.allclose(half, 1.959963984540054 * c1_fit.se)
    table = c1_fit.coefficient_table()
    assert list(table.columns) == ["parameter", "estimate", "se", "ci_low", "ci_high"]
    assert table["parameter"].tolist() == c1_fit.coefficient_names


def test_fit_without_covariance(c1_ctx):
    fit = fit_qmle(c1_ctx, compute_covariance=False)
    assert fit.cov is None and fit.se is None
    assert "se" not in fit.coefficient_table().columns


def test_fit_result_serializes(c1_fit):
    payload = c1_fit.to_dict()
    assert [c["name"] for c in payload["coefficients"]] == c1_fit.coefficient_names
    assert payload["convergence"]["status"] == "converged"
    assert len(payload["cov"]) == 6


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def test_bootstrap_rejects_zero_replications(c1_ctx, c1_fit):
    with pytest.raises(InvalidReplicationCount):
        bootstrap_se(c1_ctx, c1_fit, 0, *BETA_POISSON, seed=1, workers=1)


def test_bootstrap_rejects_mismatched_family(c1_ctx, c1_fit):
    with pytest.raises(FamilyMismatch):
        bootstrap_se(c1_ctx, c1_fit, 5, family(FamilyKind.POISSON), family(FamilyKind.POISSON), seed=1, workers=1)


def test_bootstrap_is_seeded_and_worker_count_invariant(c1_ctx, c1_fit):
    serial = bootstrap_se(c1_ctx, c1_fit, 4, *BETA_POISSON, seed=17, workers=1, burn_in=100)
    again = bootstrap_se(c1_ctx, c1_fit, 4, *BETA_POISSON, seed=17, workers=1, burn_in=100)
    pooled = bootstrap_se(c1_ctx, c1_fit, 4, *BETA_POISSON, seed=17, workers=2, burn_in=100)
    assert serial.n_failed == 0 and serial.valid
    assert np.array_equal(serial.estimates, again.estimates)
    assert np.array_equal(serial.estimates, pooled.estimates)
    assert serial.estimates.shape == (4, 6)
    assert (serial.se > 0).all()


def test_bootstrap_table_has_both_interval_constructions(c1_ctx, c1_fit):
    boot = bootstrap_se(c1_ctx, c1_fit, 6, *BETA_POISSON, seed=3, workers=1, burn_in=100)
    frame = boot.to_frame()
    assert frame["parameter"].tolist() == c1_fit.coefficient_names + ["phi1", "phi2"]
    assert np.allclose(boot.normal_ci[:, 1] - boot.normal_ci[:, 0], 2 * 1.959963984540054 * boot.se)
    assert (boot.quantile_ci[:, 0] <= boot.quantile_ci[:, 1]).all()
    assert boot.to_dict()["succeeded"] == 6
