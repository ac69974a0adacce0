"""
Quasi-Likelihood Core
Linear predictors, conditional means, quasi-log-likelihood contributions and the analytic score
"""

from dataclasses import dataclass
from typing import Tuple, Union
import logging

import numpy as np
from scipy import integrate
from scipy.special import expit, xlogy

from app.errors import DomainViolation, NonFinitePredictor
from app.models import (
    BivariateSeries,
    LinkFunction,
    LinkKind,
    ModelContext,
    ModelSpec,
    ParamVector,
    TransformKind,
    VarianceFunction,
    VarianceKind,
)

logger = logging.getLogger(__name__)

EPS = 1e-6
LOGIT_CLIP = 35.0
EXP_CLIP = 30.0

ArrayLike = Union[float, np.ndarray]


def transform_series(y, link: LinkFunction, report: bool = False):
    """
    Apply the lag transform T to observations: T = g for SameAsLink,
    T(y) = log(y + 1) for LogPlusOne. Logit inputs are clamped to [EPS, 1 - EPS]
    and log inputs below at EPS.

    With report=True returns (values, clamped_flag).
    """
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise DomainViolation("cannot transform non-finite observations")
    clamped = False
    if link.transform_kind == TransformKind.LOG_PLUS_ONE:
        if (y < 0).any():
            idx = int(np.argmax(y < 0))
            raise DomainViolation(
                f"log1p transform needs y >= 0, got {y[idx]}", index=idx, value=float(y[idx])
            )
        out = np.log1p(y)
    elif link.kind == LinkKind.LOGIT:
        if ((y < 0) | (y > 1)).any():
            idx = int(np.argmax((y < 0) | (y > 1)))
            raise DomainViolation(
                f"logit transform needs y in [0, 1], got {y[idx]}", index=idx, value=float(y[idx])
            )
        yc = np.clip(y, EPS, 1.0 - EPS)
        clamped = bool((yc != y).any())
        out = np.log(yc / (1.0 - yc))
    elif link.kind == LinkKind.LOG:
        if (y < 0).any():
            idx = int(np.argmax(y < 0))
            raise DomainViolation(
                f"log transform needs y >= 0, got {y[idx]}", index=idx, value=float(y[idx])
            )
        yc = np.maximum(y, EPS)
        clamped = bool((yc != y).any())
        out = np.log(yc)
    else:
        out = y.copy()
    if report:
        return out, clamped
    return out


def link_function(mu: ArrayLike, link: LinkFunction) -> ArrayLike:
    """g(mu)"""
    mu = np.asarray(mu, dtype=float)
    if link.kind == LinkKind.LOGIT:
        return np.log(mu / (1.0 - mu))
    if link.kind == LinkKind.LOG:
        return np.log(mu)
    return mu


def inverse_link(nu: ArrayLike, link: LinkFunction) -> ArrayLike:
    """g^-1(nu), saturating instead of overflowing"""
    nu = np.asarray(nu, dtype=float)
    if link.kind == LinkKind.LOGIT:
        return expit(np.clip(nu, -LOGIT_CLIP, LOGIT_CLIP))
    if link.kind == LinkKind.LOG:
        return np.exp(np.minimum(nu, EXP_CLIP))
    return nu


def link_derivative(mu: ArrayLike, link: LinkFunction) -> ArrayLike:
    """g'(mu)"""
    mu = np.asarray(mu, dtype=float)
    if link.kind == LinkKind.LOGIT:
        return 1.0 / (mu * (1.0 - mu))
    if link.kind == LinkKind.LOG:
        return 1.0 / mu
    return np.ones_like(mu)


def variance(mu: ArrayLike, variance_fn: VarianceFunction) -> ArrayLike:
    """V(mu)"""
    mu = np.asarray(mu, dtype=float)
    kind = variance_fn.kind
    if kind == VarianceKind.CONSTANT:
        return np.ones_like(mu)
    if kind == VarianceKind.LINEAR:
        return mu
    if kind == VarianceKind.BERNOULLI_LIKE:
        return mu * (1.0 - mu)
    return mu * mu


def clamp_mean(mu: ArrayLike, variance_fn: VarianceFunction) -> Tuple[np.ndarray, bool]:
    """Clamp means strictly inside the variance function's positive domain"""
    mu = np.asarray(mu, dtype=float)
    kind = variance_fn.kind
    if kind == VarianceKind.BERNOULLI_LIKE:
        out = np.clip(mu, EPS, 1.0 - EPS)
    elif kind in (VarianceKind.LINEAR, VarianceKind.QUADRATIC):
        out = np.maximum(mu, EPS)
    else:
        return mu, False
    return out, bool((out != mu).any())


def _clamp_observation(y: np.ndarray, variance_fn: VarianceFunction) -> np.ndarray:
    if variance_fn.kind == VarianceKind.BERNOULLI_LIKE:
        return np.clip(y, EPS, 1.0 - EPS)
    return y


def build_design(
    own: np.ndarray, other: np.ndarray, own_lags, cross_lags, m: int
) -> np.ndarray:
    """Rows t = m..n-1 (0-based): [1, own[t-l] for own lags, other[t-l] for cross lags]"""
    n = len(own)
    rows = n - m
    columns = [np.ones(rows)]
    columns.extend(own[m - lag:n - lag] for lag in own_lags)
    columns.extend(other[m - lag:n - lag] for lag in cross_lags)
    return np.column_stack(columns)


@dataclass(frozen=True)
class MeanPath:
    """Linear predictors and conditional means for t = m+1..n"""

    nu1: np.ndarray
    nu2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    clamped: Tuple[bool, bool] = (False, False)

    def nu(self, j: int) -> np.ndarray:
        return self.nu1 if j == 1 else self.nu2

    def mu(self, j: int) -> np.ndarray:
        return self.mu1 if j == 1 else self.mu2


def equation_means(ctx: ModelContext, j: int, coef: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """(nu, mu, clamped) for equation j at coefficient block `coef`"""
    coef = np.asarray(coef, dtype=float)
    if np.isnan(coef).any():
        raise NonFinitePredictor(f"NaN coefficient in equation {j}", equation=j)
    eq = ctx.spec.equation(j)
    with np.errstate(over="ignore", invalid="ignore"):
        nu = ctx.design(j) @ coef
    if np.isnan(nu).any():
        raise NonFinitePredictor(f"linear predictor of equation {j} is NaN", equation=j)
    mu, clamped = clamp_mean(inverse_link(nu, eq.link), eq.variance)
    return nu, mu, clamped


def mean_path(ctx: ModelContext, theta: ParamVector) -> MeanPath:
    theta.check_conforms(ctx.spec)
    nu1, mu1, c1 = equation_means(ctx, 1, theta.block(1))
    nu2, mu2, c2 = equation_means(ctx, 2, theta.block(2))
    return MeanPath(nu1=nu1, nu2=nu2, mu1=mu1, mu2=mu2, clamped=(c1, c2))


def _check_observations(y: np.ndarray, variance_fn: VarianceFunction) -> None:
    kind = variance_fn.kind
    if not np.isfinite(y).all():
        raise DomainViolation("non-finite observation in quasi-likelihood")
    if kind == VarianceKind.BERNOULLI_LIKE and ((y < 0) | (y > 1)).any():
        raise DomainViolation("bernoulli-like variance needs observations in [0, 1]")
    if kind in (VarianceKind.LINEAR, VarianceKind.QUADRATIC) and (y < 0).any():
        raise DomainViolation(f"{kind.value} variance needs nonnegative observations")


def ql_contribution(
    y: ArrayLike,
    mu: ArrayLike,
    phi: float,
    variance_fn: VarianceFunction,
    full: bool = False,
) -> ArrayLike:
    """
    Q(y; mu) = (1/phi) * integral_y^mu (y - w) / V(w) dw.

    full=False drops terms that depend on y only (the form used for
    estimation); full=True keeps them so that Q(y; y) = 0.
    """
    if not phi > 0:
        raise DomainViolation(f"dispersion must be positive, got {phi}", phi=phi)
    scalar = np.ndim(y) == 0 and np.ndim(mu) == 0
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if not np.isfinite(mu).all():
        raise DomainViolation("non-finite mean in quasi-likelihood")
    _check_observations(y, variance_fn)
    mu, _ = clamp_mean(mu, variance_fn)
    kind = variance_fn.kind

    if kind == VarianceKind.CONSTANT:
        q = -0.5 * (mu - y) ** 2
    elif kind == VarianceKind.LINEAR:
        q = xlogy(y, mu) - mu
        if full:
            q = q - xlogy(y, y) + y
    elif kind == VarianceKind.BERNOULLI_LIKE:
        yc = _clamp_observation(y, variance_fn)
        q = xlogy(yc, mu) + xlogy(1.0 - yc, 1.0 - mu)
        if full:
            q = q - xlogy(yc, yc) - xlogy(1.0 - yc, 1.0 - yc)
    else:
        q = -y / mu - np.log(mu)
        if full:
            if (y <= 0).any():
                raise DomainViolation("full quadratic quasi-likelihood needs y > 0")
            q = q + 1.0 + np.log(y)
    q = q / phi
    return float(q) if scalar else q


def ql_contribution_quadrature(
    y: float, mu: float, phi: float, variance_fn: VarianceFunction
) -> float:
    """Q(y; mu) by adaptive quadrature of the defining integral"""
    def integrand(w):
        return (y - w) / float(variance(w, variance_fn))

    mid = 0.5 * (y + mu)
    first, _ = integrate.quad(integrand, y, mid, epsabs=1e-12, epsrel=1e-11, limit=200)
    second, _ = integrate.quad(integrand, mid, mu, epsabs=1e-12, epsrel=1e-11, limit=200)
    return (first + second) / phi


def equation_quasi_loglik(
    ctx: ModelContext, j: int, coef: np.ndarray, phi: float = 1.0, full: bool = False
) -> float:
    _, mu, _ = equation_means(ctx, j, coef)
    eq = ctx.spec.equation(j)
    return float(np.sum(ql_contribution(ctx.response(j), mu, phi, eq.variance, full=full)))


def quasi_loglik(ctx: ModelContext, theta: ParamVector, full: bool = False) -> float:
    """Sum over t = m+1..n of Q1(y1t; mu1t) + Q2(y2t; mu2t)"""
    theta.check_conforms(ctx.spec)
    return equation_quasi_loglik(ctx, 1, theta.block(1), theta.phi1, full) + equation_quasi_loglik(
        ctx, 2, theta.block(2), theta.phi2, full
    )


def deviance(ctx: ModelContext, theta: ParamVector) -> float:
    """D(y; mu) = -2 * sum [phi1 Q1 + phi2 Q2] under the full-integral forms"""
    theta.check_conforms(ctx.spec)
    total = 0.0
    for j in (1, 2):
        total += equation_quasi_loglik(ctx, j, theta.block(j), 1.0, full=True)
    return -2.0 * total


def equation_weights(ctx: ModelContext, j: int, coef: np.ndarray, phi: float = 1.0):
    """
    Per-observation score weights (y - mu) / (phi V(mu) g'(mu)) and expected
    information weights 1 / (phi V(mu) g'(mu)^2).
    """
    eq = ctx.spec.equation(j)
    _, mu, _ = equation_means(ctx, j, coef)
    y = _clamp_observation(ctx.response(j), eq.variance)
    v = variance(mu, eq.variance)
    gprime = link_derivative(mu, eq.link)
    score_w = (y - mu) / (phi * v * gprime)
    info_w = 1.0 / (phi * v * gprime * gprime)
    return score_w, info_w


def score_contributions(ctx: ModelContext, theta: ParamVector) -> np.ndarray:
    """U_t(theta) stacked as rows, columns in flattening order"""
    theta.check_conforms(ctx.spec)
    blocks = []
    for j in (1, 2):
        w, _ = equation_weights(ctx, j, theta.block(j), theta.phi(j))
        blocks.append(ctx.design(j) * w[:, None])
    return np.hstack(blocks)


def score(ctx: ModelContext, theta: ParamVector) -> np.ndarray:
    return score_contributions(ctx, theta).sum(axis=0)


def expected_information(ctx: ModelContext, theta: ParamVector) -> np.ndarray:
    """Sum over t of the block-diagonal conditional-expected Hessian H_t"""
    theta.check_conforms(ctx.spec)
    size = ctx.spec.n_coefficients
    info = np.zeros((size, size))
    for j in (1, 2):
        _, w = equation_weights(ctx, j, theta.block(j), theta.phi(j))
        x = ctx.design(j)
        block = ctx.spec.block_slice(j)
        info[block, block] = x.T @ (x * w[:, None])
    return info


def objective_and_gradient(ctx: ModelContext, flat: np.ndarray) -> Tuple[float, np.ndarray]:
    """-Q(theta) and its gradient at unit dispersions, for the optimizer"""
    spec = ctx.spec
    value = 0.0
    grads = []
    for j in (1, 2):
        coef = flat[spec.block_slice(j)]
        value += equation_quasi_loglik(ctx, j, coef)
        w, _ = equation_weights(ctx, j, coef)
        grads.append(ctx.design(j).T @ w)
    return -value, -np.concatenate(grads)


def one_step_mean(spec: ModelSpec, theta: ParamVector, data: BivariateSeries, j: int) -> float:
    """
    Conditional mean of series j at time n+1 given the observed history
    y_1..y_n, using only the supplied data.
    """
    theta.check_conforms(spec)
    eq = spec.equation(j)
    other = 2 if j == 1 else 1
    own_t = transform_series(data.values(j), eq.link)
    other_t = transform_series(data.values(other), spec.equation(other).link)
    n = data.n
    if n < spec.m:
        raise DomainViolation(f"need at least {spec.m} observations to forecast, got {n}")
    row = [1.0]
    row.extend(own_t[n - lag] for lag in eq.own_lags)
    row.extend(other_t[n - lag] for lag in eq.cross_lags)
    nu = float(np.dot(row, theta.block(j)))
    if np.isnan(nu):
        raise NonFinitePredictor("forecast linear predictor is NaN", equation=j)
    mu, _ = clamp_mean(inverse_link(nu, eq.link), eq.variance)
    return float(mu)
