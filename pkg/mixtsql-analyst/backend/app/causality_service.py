"""
Causality Service
Quasi-likelihood-ratio Granger causality tests between the two series
"""

from dataclasses import dataclass
from typing import Any, Dict
import logging

import numpy as np
from scipy import stats

from app.errors import EmptyCrossLags, QLRConvergenceError
from app.estimation_service import DEFAULT_MAX_ITER, DEFAULT_TOL, FitResult, fit_qmle
from app.models import ModelContext, VarianceFunction, VarianceKind, validate_spec
from app.quasi_likelihood import EPS, clamp_mean, ql_contribution

logger = logging.getLogger(__name__)

QLR_FLOOR = -1e-8

# direction -> equation whose cross lags are tested
DIRECTIONS = {"1->2": 2, "2->1": 1}


@dataclass(frozen=True)
class GrangerTestResult:
    direction: str
    qlr: float
    qlr_generic: float
    df: int
    p_value: float
    restricted_fit: FitResult
    unrestricted_fit: FitResult
    phi_used: float

    @property
    def phi2_used(self) -> float:
        return self.phi_used

    def to_dict(self) -> Dict[str, Any]:
        return {
            "direction": self.direction,
            "qlr": self.qlr,
            "qlr_generic": self.qlr_generic,
            "df": self.df,
            "p_value": self.p_value,
            "phi_used": self.phi_used,
            "unrestricted_qll": self.unrestricted_fit.qll,
            "restricted_qll": self.restricted_fit.qll,
            "unrestricted_converged": self.unrestricted_fit.converged,
            "restricted_converged": self.restricted_fit.converged,
        }


def qlr_closed_form(
    y: np.ndarray, mu_hat: np.ndarray, mu_null: np.ndarray, phi: float, variance_fn: VarianceFunction
) -> float:
    """(2 / phi) * sum [Q(y; mu_hat) - Q(y; mu_null)] in closed form per variance kind"""
    y = np.asarray(y, dtype=float)
    mu, _ = clamp_mean(mu_hat, variance_fn)
    mu0, _ = clamp_mean(mu_null, variance_fn)
    kind = variance_fn.kind
    if kind == VarianceKind.CONSTANT:
        terms = 0.5 * ((y - mu0) ** 2 - (y - mu) ** 2)
    elif kind == VarianceKind.LINEAR:
        terms = y * np.log(mu / mu0) - (mu - mu0)
    elif kind == VarianceKind.BERNOULLI_LIKE:
        yc = np.clip(y, EPS, 1.0 - EPS)
        terms = yc * np.log((mu / mu0) * (1.0 - mu0) / (1.0 - mu)) + np.log((1.0 - mu) / (1.0 - mu0))
    else:
        terms = y / mu0 + np.log(mu0) - y / mu - np.log(mu)
    return float(2.0 / phi * np.sum(terms))


def qlr_generic(
    y: np.ndarray, mu_hat: np.ndarray, mu_null: np.ndarray, phi: float, variance_fn: VarianceFunction
) -> float:
    """Same statistic through the difference of quasi-likelihood contributions"""
    diff = ql_contribution(y, mu_hat, 1.0, variance_fn) - ql_contribution(y, mu_null, 1.0, variance_fn)
    return float(2.0 / phi * np.sum(diff))


def granger_test(
    ctx: ModelContext,
    direction: str = "1->2",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> GrangerTestResult:
    """
    Test H0: all cross-lag coefficients of the target equation are zero.
    "1->2" tests whether series 1 Granger-causes series 2 (gamma2 = 0);
    "2->1" is the same routine on equation 1. The dispersion in the
    denominator comes from the unrestricted fit.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    j = DIRECTIONS[direction]
    eq = ctx.spec.equation(j)
    if not eq.cross_lags:
        raise EmptyCrossLags(
            f"equation {j} has no cross lags to test for direction {direction}",
            direction=direction, equation=j,
        )

    logger.info(f"🔄 Granger test {direction}: fitting unrestricted and restricted models")
    unrestricted = fit_qmle(ctx, tol=tol, max_iter=max_iter, compute_covariance=False)
    restricted_ctx = validate_spec(ctx.spec.restricted(j), ctx.data, m=ctx.m)
    restricted = fit_qmle(restricted_ctx, tol=tol, max_iter=max_iter, compute_covariance=False)

    phi = unrestricted.phi_hat(j)
    if not phi > 0:
        phi = 1.0
        logger.warning("⚠️ Degenerate dispersion in the unrestricted fit; QLR uses phi = 1")
    qlr = qlr_closed_form(
        ctx.response(j), unrestricted.mean_path.mu(j), restricted.mean_path.mu(j), phi, eq.variance
    )
    if qlr < QLR_FLOOR:
        raise QLRConvergenceError(
            f"negative QLR {qlr:.3e}: the restricted fit beats the unrestricted one",
            qlr=qlr, direction=direction,
        )
    qlr = max(qlr, 0.0)
    generic = qlr_generic(
        ctx.response(j), unrestricted.mean_path.mu(j), restricted.mean_path.mu(j), phi, eq.variance
    )
    df = len(eq.cross_lags)
    p_value = float(stats.chi2.sf(qlr, df))
    logger.info(f"📊 QLR = {qlr:.4f} on {df} df, p = {p_value:.3g}")
    return GrangerTestResult(
        direction=direction,
        qlr=qlr,
        qlr_generic=generic,
        df=df,
        p_value=p_value,
        restricted_fit=restricted,
        unrestricted_fit=unrestricted,
        phi_used=float(phi),
    )


def granger_tests(ctx: ModelContext, **kwargs) -> Dict[str, GrangerTestResult]:
    """Both directions, skipping any without cross lags"""
    results = {}
    for direction, j in DIRECTIONS.items():
        if ctx.spec.equation(j).cross_lags:
            results[direction] = granger_test(ctx, direction, **kwargs)
    return results
