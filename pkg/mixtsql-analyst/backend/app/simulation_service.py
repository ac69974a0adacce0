"""
Simulation Service
Trajectory generation from a MixTSQL model and the preset simulation configurations
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import logging
import math

import numpy as np

from app.errors import ExplosivePath
from app.families import FamilyKind, SamplingFamily, check_family_matches, family
from app.models import (
    BivariateSeries,
    EquationSpec,
    LinkFunction,
    LinkKind,
    ModelSpec,
    ParamVector,
    TransformKind,
    VarianceFunction,
    VarianceKind,
)
from app.quasi_likelihood import EPS, EXP_CLIP, LOGIT_CLIP

logger = logging.getLogger(__name__)

DEFAULT_BURN_IN = 500
MEAN_OVERFLOW_GUARD = 1e8


def _inverse_link_scalar(nu: float, link: LinkFunction) -> float:
    if link.kind == LinkKind.LOGIT:
        return 1.0 / (1.0 + math.exp(-min(max(nu, -LOGIT_CLIP), LOGIT_CLIP)))
    if link.kind == LinkKind.LOG:
        return math.exp(min(nu, EXP_CLIP))
    return nu


def _clamp_mean_scalar(mu: float, variance_fn: VarianceFunction) -> float:
    if variance_fn.kind == VarianceKind.BERNOULLI_LIKE:
        return min(max(mu, EPS), 1.0 - EPS)
    if variance_fn.kind in (VarianceKind.LINEAR, VarianceKind.QUADRATIC):
        return max(mu, EPS)
    return mu


def _transform_scalar(y: float, link: LinkFunction) -> float:
    # Scalar twin of quasi_likelihood.transform_series
    if link.transform_kind == TransformKind.LOG_PLUS_ONE:
        return math.log1p(y)
    if link.kind == LinkKind.LOGIT:
        yc = min(max(y, EPS), 1.0 - EPS)
        return math.log(yc / (1.0 - yc))
    if link.kind == LinkKind.LOG:
        return math.log(max(y, EPS))
    return y


def simulate_trajectory(
    spec: ModelSpec,
    theta: ParamVector,
    families: Sequence[SamplingFamily],
    n: int,
    burn_in: int = DEFAULT_BURN_IN,
    rng: Optional[np.random.Generator] = None,
) -> BivariateSeries:
    """
    Iterate the conditional-mean recursions and draw Y1t, Y2t independently
    given the past. Transformed pre-sample lags start at 0 and the first
    `burn_in` steps are discarded.
    """
    theta.check_conforms(spec)
    check_family_matches(spec, families)
    rng = rng if rng is not None else np.random.default_rng()
    m = spec.m
    total = burn_in + n
    values = (np.zeros(total), np.zeros(total))
    lagged = (np.zeros(m + total), np.zeros(m + total))
    coefs = (theta.block(1).tolist(), theta.block(2).tolist())
    phis = (theta.phi1, theta.phi2)
    eqs = (spec.eq1, spec.eq2)

    for step in range(total):
        i = m + step
        draws = []
        for j in (0, 1):
            eq, coef = eqs[j], coefs[j]
            own, other = lagged[j], lagged[1 - j]
            nu = coef[0]
            pos = 1
            for lag in eq.own_lags:
                nu += coef[pos] * own[i - lag]
                pos += 1
            for lag in eq.cross_lags:
                nu += coef[pos] * other[i - lag]
                pos += 1
            mu_raw = _inverse_link_scalar(nu, eq.link)
            if not math.isfinite(mu_raw) or abs(mu_raw) > MEAN_OVERFLOW_GUARD:
                raise ExplosivePath(
                    f"conditional mean of series {j + 1} exploded at t={step - burn_in + 1}",
                    t=step - burn_in + 1, series=j + 1, mu=mu_raw,
                )
            draws.append(families[j].sample(_clamp_mean_scalar(mu_raw, eq.variance), phis[j], rng))
        for j in (0, 1):
            values[j][step] = draws[j]
            lagged[j][i] = _transform_scalar(draws[j], eqs[j].link)

    return BivariateSeries(
        y1=tuple(values[0][burn_in:].tolist()),
        y2=tuple(values[1][burn_in:].tolist()),
        domain1=families[0].support,
        domain2=families[1].support,
    )


# ---------------------------------------------------------------------------
# Preset configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Configuration:
    """A generator model with its true parameters and sampling families"""

    name: str
    spec: ModelSpec
    theta: ParamVector
    families: Tuple[SamplingFamily, SamplingFamily]
    bootstrap_families: Tuple[SamplingFamily, SamplingFamily]
    fit_spec: Optional[ModelSpec] = None

    @property
    def fitted_spec(self) -> ModelSpec:
        return self.fit_spec or self.spec


def bounded_count_spec(
    own_lags_1=(1,), cross_lags_1=(1,), own_lags_2=(1,), cross_lags_2=(1,)
) -> ModelSpec:
    """Logit / bernoulli-like series 1 and log / linear series 2 with log1p lags"""
    return ModelSpec(
        eq1=EquationSpec(
            link=LinkFunction(kind=LinkKind.LOGIT),
            variance=VarianceFunction(kind=VarianceKind.BERNOULLI_LIKE),
            own_lags=own_lags_1,
            cross_lags=cross_lags_1,
        ),
        eq2=EquationSpec(
            link=LinkFunction(kind=LinkKind.LOG, transform_kind=TransformKind.LOG_PLUS_ONE),
            variance=VarianceFunction(kind=VarianceKind.LINEAR),
            own_lags=own_lags_2,
            cross_lags=cross_lags_2,
        ),
    )


def configuration(name: str, gamma2_zero: bool = False) -> Configuration:
    """
    C1 and C2 generate from beta-Poisson and bootstrap from beta-Poisson;
    C3 generates from the bounded alternative with Poisson counts and
    bootstraps from beta-double-Poisson. gamma2_zero forces the cross effect
    of series 1 on series 2 to zero in the generator (Granger null).
    """
    key = name.upper()
    beta_poisson = (family(FamilyKind.BETA), family(FamilyKind.POISSON))
    if key == "C1":
        spec = bounded_count_spec()
        theta = ParamVector(
            beta1=(1.0, 0.2), gamma1=(-0.2,), beta2=(1.0, 0.2), gamma2=(-0.2,), phi1=0.2, phi2=1.0
        )
        config = Configuration("C1", spec, theta, beta_poisson, beta_poisson)
    elif key == "C2":
        spec = bounded_count_spec(cross_lags_1=(1, 2, 3, 4), cross_lags_2=(1, 2, 3, 4))
        theta = ParamVector(
            beta1=(1.5, 0.2), gamma1=(-0.5, 0.0, 0.0, 0.3),
            beta2=(1.0, 0.2), gamma2=(-0.2, 0.0, 0.0, 0.1),
            phi1=0.1, phi2=1.0,
        )
        wide = tuple(range(1, 11))
        fit_spec = bounded_count_spec(cross_lags_1=wide, cross_lags_2=wide)
        config = Configuration("C2", spec, theta, beta_poisson, beta_poisson, fit_spec)
    elif key == "C3":
        spec = bounded_count_spec()
        theta = ParamVector(
            beta1=(-0.5, 0.2), gamma1=(0.25,), beta2=(1.0, 0.2), gamma2=(0.2,), phi1=0.1, phi2=1.0
        )
        config = Configuration(
            "C3", spec, theta,
            (family(FamilyKind.BOUNDED_ALTERNATIVE), family(FamilyKind.POISSON)),
            (family(FamilyKind.BETA), family(FamilyKind.DOUBLE_POISSON)),
        )
    else:
        raise ValueError(f"unknown configuration '{name}', expected C1, C2 or C3")

    if gamma2_zero:
        theta = config.theta.model_copy(update={"gamma2": tuple(0.0 for _ in config.theta.gamma2)})
        config = Configuration(
            f"{config.name}-null", config.spec, theta, config.families,
            config.bootstrap_families, config.fit_spec,
        )
    return config
