"""
Sampling Families
Distributions matched to a quasi-likelihood mean-variance specification, used
for simulation, pseudo-parametric bootstrap, PIT diagnostics and prediction intervals
"""

from enum import Enum
from functools import lru_cache
from typing import Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import optimize, stats
from scipy.special import gammaln, xlogy

from app.errors import DomainViolation, FamilyMismatch, TruncationInsufficient
from app.models import ModelSpec, SeriesDomain, VarianceKind

logger = logging.getLogger(__name__)

TAIL_TOLERANCE = 1e-10


class FamilyKind(str, Enum):
    BETA = "beta"                                # Var = phi mu (1 - mu), phi in (0, 1)
    POISSON = "poisson"                          # Var = mu
    DOUBLE_POISSON = "double_poisson"            # Var ~ phi mu
    BOUNDED_ALTERNATIVE = "bounded_alternative"  # two-component beta mixture, Var = phi mu (1 - mu)
    GAUSSIAN = "gaussian"                        # Var = phi
    GAMMA = "gamma"                              # Var = phi mu^2


_VARIANCE_OF = {
    FamilyKind.BETA: VarianceKind.BERNOULLI_LIKE,
    FamilyKind.BOUNDED_ALTERNATIVE: VarianceKind.BERNOULLI_LIKE,
    FamilyKind.POISSON: VarianceKind.LINEAR,
    FamilyKind.DOUBLE_POISSON: VarianceKind.LINEAR,
    FamilyKind.GAUSSIAN: VarianceKind.CONSTANT,
    FamilyKind.GAMMA: VarianceKind.QUADRATIC,
}

_SUPPORT_OF = {
    FamilyKind.BETA: SeriesDomain.UNIT_INTERVAL,
    FamilyKind.BOUNDED_ALTERNATIVE: SeriesDomain.UNIT_INTERVAL,
    FamilyKind.POISSON: SeriesDomain.NONNEGATIVE_COUNT,
    FamilyKind.DOUBLE_POISSON: SeriesDomain.NONNEGATIVE_COUNT,
    FamilyKind.GAUSSIAN: SeriesDomain.REAL,
    FamilyKind.GAMMA: SeriesDomain.POSITIVE_REAL,
}


# ---------------------------------------------------------------------------
# Beta with mean / dispersion parameterization
# ---------------------------------------------------------------------------

def beta_parameters(mu: float, phi: float) -> Tuple[float, float]:
    """(a, b) with mean mu and variance phi mu (1 - mu)"""
    if not (0.0 < mu < 1.0):
        raise DomainViolation(f"beta mean must lie in (0, 1), got {mu}", mu=mu)
    if not (0.0 < phi < 1.0):
        raise DomainViolation(f"beta dispersion must lie in (0, 1), got {phi}", phi=phi)
    precision = 1.0 / phi - 1.0
    return mu * precision, (1.0 - mu) * precision


def sample_beta_mean_dispersion(mu: float, phi: float, rng: np.random.Generator) -> float:
    a, b = beta_parameters(mu, phi)
    return float(rng.beta(a, b))


# ---------------------------------------------------------------------------
# Efron's double Poisson, tabulated and normalized numerically
# ---------------------------------------------------------------------------

def double_poisson_support_max(mu: float, phi: float) -> int:
    return int(math.ceil(mu * (1.0 + phi) * 10.0 + 100.0))


def double_poisson_log_kernel(y: np.ndarray, mu: float, phi: float) -> np.ndarray:
    """log of theta^1/2 e^(-theta mu) (e^-y y^y / y!) (e mu / y)^(theta y), theta = 1/phi"""
    theta = 1.0 / phi
    return (
        0.5 * math.log(theta)
        - theta * mu
        - y + xlogy(y, y) - gammaln(y + 1.0)
        + theta * (y + xlogy(y, mu) - xlogy(y, y))
    )


@lru_cache(maxsize=4096)
def _double_poisson_table(mu: float, phi: float) -> Tuple[np.ndarray, np.ndarray]:
    y_max = double_poisson_support_max(mu, phi)
    extended = np.arange(2 * y_max + 1, dtype=float)
    log_f = double_poisson_log_kernel(extended, mu, phi)
    weights = np.exp(log_f - log_f.max())
    total = weights.sum()
    tail = weights[y_max + 1:].sum() / total
    if tail > TAIL_TOLERANCE:
        raise TruncationInsufficient(
            f"double Poisson tail mass {tail:.3e} beyond {y_max} exceeds {TAIL_TOLERANCE}",
            mu=mu, phi=phi, y_max=y_max,
        )
    pmf = weights[:y_max + 1] / weights[:y_max + 1].sum()
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    pmf.setflags(write=False)
    cdf.setflags(write=False)
    return pmf, cdf


def double_poisson_pmf(mu: float, phi: float) -> np.ndarray:
    """pmf over 0..y_max"""
    _check_count_params(mu, phi)
    return _double_poisson_table(float(mu), float(phi))[0]


def double_poisson_cdf_table(mu: float, phi: float) -> np.ndarray:
    _check_count_params(mu, phi)
    return _double_poisson_table(float(mu), float(phi))[1]


def _check_count_params(mu: float, phi: float) -> None:
    if not (mu > 0 and math.isfinite(mu)):
        raise DomainViolation(f"double Poisson mean must be positive, got {mu}", mu=mu)
    if not (phi > 0 and math.isfinite(phi)):
        raise DomainViolation(f"double Poisson dispersion must be positive, got {phi}", phi=phi)


def sample_double_poisson(mu: float, phi: float, rng: np.random.Generator) -> int:
    """Inverse-CDF draw: smallest y with CDF(y) >= u"""
    cdf = double_poisson_cdf_table(mu, phi)
    return int(np.searchsorted(cdf, rng.random(), side="left"))


# ---------------------------------------------------------------------------
# Bounded alternative: two-component beta mixture matching (mu, phi mu (1 - mu))
# ---------------------------------------------------------------------------

def bounded_alternative_components(mu: float, phi: float) -> Tuple[float, float, float]:
    """
    Equal-weight mixture of Beta laws with means mu -/+ delta and common
    dispersion phi_c, chosen so the mixture variance is phi mu (1 - mu).
    Returns (delta, phi_c, mu).
    """
    beta_parameters(mu, phi)
    v = mu * (1.0 - mu)
    delta = min(math.sqrt(0.5 * phi * v), 0.5 * min(mu, 1.0 - mu))
    phi_c = (phi * v - delta ** 2) / (v - delta ** 2)
    return delta, phi_c, mu


def sample_bounded_alternative(mu: float, phi: float, rng: np.random.Generator) -> float:
    delta, phi_c, _ = bounded_alternative_components(mu, phi)
    centre = mu - delta if rng.random() < 0.5 else mu + delta
    return sample_beta_mean_dispersion(centre, phi_c, rng)


def _bounded_alternative_cdf(y, mu: float, phi: float):
    delta, phi_c, _ = bounded_alternative_components(mu, phi)
    a1, b1 = beta_parameters(mu - delta, phi_c)
    a2, b2 = beta_parameters(mu + delta, phi_c)
    return 0.5 * (stats.beta.cdf(y, a1, b1) + stats.beta.cdf(y, a2, b2))


# ---------------------------------------------------------------------------
# Family object
# ---------------------------------------------------------------------------

class SamplingFamily(BaseModel):
    """A conditional distribution parameterized by (mu, phi)"""

    model_config = ConfigDict(frozen=True)

    kind: FamilyKind

    @property
    def variance_kind(self) -> VarianceKind:
        return _VARIANCE_OF[self.kind]

    @property
    def support(self) -> SeriesDomain:
        return _SUPPORT_OF[self.kind]

    @property
    def is_discrete(self) -> bool:
        return self.support == SeriesDomain.NONNEGATIVE_COUNT

    def sample(self, mu: float, phi: float, rng: np.random.Generator) -> float:
        kind = self.kind
        if kind == FamilyKind.BETA:
            return sample_beta_mean_dispersion(mu, phi, rng)
        if kind == FamilyKind.BOUNDED_ALTERNATIVE:
            return sample_bounded_alternative(mu, phi, rng)
        if kind == FamilyKind.DOUBLE_POISSON:
            return float(sample_double_poisson(mu, phi, rng))
        if kind == FamilyKind.POISSON:
            if not mu > 0:
                raise DomainViolation(f"Poisson mean must be positive, got {mu}", mu=mu)
            return float(rng.poisson(mu))
        if kind == FamilyKind.GAUSSIAN:
            return float(rng.normal(mu, math.sqrt(phi)))
        if not (mu > 0 and phi > 0):
            raise DomainViolation(f"gamma needs mu > 0 and phi > 0, got ({mu}, {phi})")
        return float(rng.gamma(1.0 / phi, mu * phi))

    def cdf(self, y, mu: float, phi: float):
        """F(y); for count families F at integer y, with F(-1) = 0"""
        kind = self.kind
        if kind == FamilyKind.BETA:
            a, b = beta_parameters(mu, phi)
            return stats.beta.cdf(y, a, b)
        if kind == FamilyKind.BOUNDED_ALTERNATIVE:
            return _bounded_alternative_cdf(y, mu, phi)
        if kind == FamilyKind.POISSON:
            return stats.poisson.cdf(y, mu)
        if kind == FamilyKind.DOUBLE_POISSON:
            table = double_poisson_cdf_table(mu, phi)
            idx = np.floor(np.asarray(y, dtype=float)).astype(int)
            out = np.where(idx < 0, 0.0, table[np.clip(idx, 0, len(table) - 1)])
            return float(out) if np.ndim(out) == 0 else out
        if kind == FamilyKind.GAUSSIAN:
            return stats.norm.cdf(y, loc=mu, scale=math.sqrt(phi))
        return stats.gamma.cdf(y, 1.0 / phi, scale=mu * phi)

    def ppf(self, q: float, mu: float, phi: float) -> float:
        """Quantile; for counts the smallest y with F(y) >= q"""
        kind = self.kind
        if kind == FamilyKind.BETA:
            a, b = beta_parameters(mu, phi)
            return float(stats.beta.ppf(q, a, b))
        if kind == FamilyKind.BOUNDED_ALTERNATIVE:
            return float(optimize.brentq(lambda y: _bounded_alternative_cdf(y, mu, phi) - q, 0.0, 1.0))
        if kind == FamilyKind.POISSON:
            return float(stats.poisson.ppf(q, mu))
        if kind == FamilyKind.DOUBLE_POISSON:
            return float(np.searchsorted(double_poisson_cdf_table(mu, phi), q, side="left"))
        if kind == FamilyKind.GAUSSIAN:
            return float(stats.norm.ppf(q, loc=mu, scale=math.sqrt(phi)))
        return float(stats.gamma.ppf(q, 1.0 / phi, scale=mu * phi))


def family(kind) -> SamplingFamily:
    return SamplingFamily(kind=FamilyKind(kind))


def default_family(variance_kind: VarianceKind) -> SamplingFamily:
    """The natural sampling family for each variance function"""
    return family(
        {
            VarianceKind.BERNOULLI_LIKE: FamilyKind.BETA,
            VarianceKind.LINEAR: FamilyKind.DOUBLE_POISSON,
            VarianceKind.CONSTANT: FamilyKind.GAUSSIAN,
            VarianceKind.QUADRATIC: FamilyKind.GAMMA,
        }[variance_kind]
    )


def check_family_matches(spec: ModelSpec, families: Sequence[SamplingFamily]) -> None:
    for j, fam in zip((1, 2), families):
        expected = spec.equation(j).variance.kind
        if fam.variance_kind != expected:
            raise FamilyMismatch(
                f"family '{fam.kind.value}' has {fam.variance_kind.value} variance but "
                f"equation {j} uses {expected.value}",
                equation=j, family=fam.kind.value, variance=expected.value,
            )
