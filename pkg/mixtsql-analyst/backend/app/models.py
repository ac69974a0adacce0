"""
MixTSQL Domain Models
Immutable descriptions of a bivariate quasi-likelihood model, its parameters and its data
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.errors import DomainViolation, IncompatibleLinkDomain, SeriesTooShort

logger = logging.getLogger(__name__)


class VarianceKind(str, Enum):
    CONSTANT = "constant"        # V(mu) = 1
    LINEAR = "linear"            # V(mu) = mu
    BERNOULLI_LIKE = "bernoulli"  # V(mu) = mu (1 - mu)
    QUADRATIC = "quadratic"      # V(mu) = mu^2


class LinkKind(str, Enum):
    LOGIT = "logit"
    LOG = "log"
    IDENTITY = "identity"


class TransformKind(str, Enum):
    SAME_AS_LINK = "same"
    LOG_PLUS_ONE = "log1p"


class SeriesDomain(str, Enum):
    UNIT_INTERVAL = "unit"
    NONNEGATIVE_COUNT = "count"
    POSITIVE_REAL = "positive"
    REAL = "real"


class VarianceFunction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: VarianceKind

    def mean_domain(self) -> Tuple[float, float]:
        """Open interval of means on which V(mu) > 0"""
        if self.kind == VarianceKind.CONSTANT:
            return (-math.inf, math.inf)
        if self.kind == VarianceKind.BERNOULLI_LIKE:
            return (0.0, 1.0)
        return (0.0, math.inf)


class LinkFunction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LinkKind
    transform_kind: TransformKind = TransformKind.SAME_AS_LINK

    @model_validator(mode="after")
    def _log_plus_one_needs_log(self):
        if self.transform_kind == TransformKind.LOG_PLUS_ONE and self.kind != LinkKind.LOG:
            raise ValueError("log1p transform is only available with the log link")
        return self


def parse_lags(value):
    if value is None:
        return ()
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",")]
        return tuple(int(p) for p in parts if p)
    if isinstance(value, (int, np.integer)):
        return (int(value),)
    return tuple(int(v) for v in value)


class EquationSpec(BaseModel):
    """One conditional-mean equation: link, variance function and lag sets"""

    model_config = ConfigDict(frozen=True)

    link: LinkFunction
    variance: VarianceFunction
    own_lags: Tuple[int, ...] = ()
    cross_lags: Tuple[int, ...] = ()

    @field_validator("own_lags", "cross_lags", mode="before")
    @classmethod
    def _coerce_lags(cls, value):
        return parse_lags(value)

    @field_validator("own_lags", "cross_lags")
    @classmethod
    def _check_lags(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate lags in {value}")
        if any(lag < 1 for lag in value):
            raise ValueError(f"lags must be >= 1, got {value}")
        return tuple(sorted(value))

    @property
    def n_coefficients(self) -> int:
        return 1 + len(self.own_lags) + len(self.cross_lags)

    @property
    def max_lag(self) -> int:
        return max(self.own_lags + self.cross_lags, default=0)

    def without_cross_lags(self) -> "EquationSpec":
        return self.model_copy(update={"cross_lags": ()})


class ModelSpec(BaseModel):
    """
    Full bivariate model. eq1 describes series 1 (e.g. a bounded viral-load
    margin), eq2 describes series 2 (e.g. a count margin).
    """

    model_config = ConfigDict(frozen=True)

    eq1: EquationSpec
    eq2: EquationSpec

    @property
    def m(self) -> int:
        # Number of leading observations conditioned on
        return max(1, self.eq1.max_lag, self.eq2.max_lag)

    def equation(self, j: int) -> EquationSpec:
        if j not in (1, 2):
            raise ValueError(f"equation index must be 1 or 2, got {j}")
        return self.eq1 if j == 1 else self.eq2

    @property
    def n_coefficients(self) -> int:
        return self.eq1.n_coefficients + self.eq2.n_coefficients

    def block_slice(self, j: int) -> slice:
        p1 = self.eq1.n_coefficients
        return slice(0, p1) if j == 1 else slice(p1, p1 + self.eq2.n_coefficients)

    def restricted(self, j: int) -> "ModelSpec":
        """Same model with the cross lags of equation j removed"""
        key = "eq1" if j == 1 else "eq2"
        return self.model_copy(update={key: self.equation(j).without_cross_lags()})

    def coefficient_names(self) -> List[str]:
        names = []
        for j in (1, 2):
            eq = self.equation(j)
            names.append(f"beta{j}_0")
            names.extend(f"beta{j}_l{lag}" for lag in eq.own_lags)
            names.extend(f"gamma{j}_l{lag}" for lag in eq.cross_lags)
        return names


class ParamVector(BaseModel):
    """
    theta = (theta1, theta2) plus dispersions.

    Flattening order: beta1_0, beta1 own lags ascending, gamma1 cross lags
    ascending, beta2_0, beta2 own lags ascending, gamma2 cross lags ascending.
    phi1 and phi2 are nuisance parameters and never enter the flat vector.
    """

    model_config = ConfigDict(frozen=True)

    beta1: Tuple[float, ...]
    gamma1: Tuple[float, ...] = ()
    beta2: Tuple[float, ...]
    gamma2: Tuple[float, ...] = ()
    phi1: float = Field(default=1.0, gt=0)
    phi2: float = Field(default=1.0, gt=0)

    @field_validator("beta1", "beta2")
    @classmethod
    def _needs_intercept(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(value) < 1:
            raise ValueError("beta must contain at least the intercept")
        return value

    def conforms_to(self, spec: ModelSpec) -> bool:
        return (
            len(self.beta1) == 1 + len(spec.eq1.own_lags)
            and len(self.gamma1) == len(spec.eq1.cross_lags)
            and len(self.beta2) == 1 + len(spec.eq2.own_lags)
            and len(self.gamma2) == len(spec.eq2.cross_lags)
        )

    def check_conforms(self, spec: ModelSpec) -> None:
        if not self.conforms_to(spec):
            raise ValueError(
                f"parameter vector with sizes ({len(self.beta1)}, {len(self.gamma1)}, "
                f"{len(self.beta2)}, {len(self.gamma2)}) does not match the model spec"
            )

    def flatten(self) -> np.ndarray:
        return np.array(self.beta1 + self.gamma1 + self.beta2 + self.gamma2, dtype=float)

    def block(self, j: int) -> np.ndarray:
        if j == 1:
            return np.array(self.beta1 + self.gamma1, dtype=float)
        return np.array(self.beta2 + self.gamma2, dtype=float)

    def phi(self, j: int) -> float:
        return self.phi1 if j == 1 else self.phi2

    @classmethod
    def unflatten(
        cls, spec: ModelSpec, values, phi1: float = 1.0, phi2: float = 1.0
    ) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (spec.n_coefficients,):
            raise ValueError(
                f"expected {spec.n_coefficients} coefficients, got shape {values.shape}"
            )
        parts = []
        pos = 0
        for eq in (spec.eq1, spec.eq2):
            for size in (1 + len(eq.own_lags), len(eq.cross_lags)):
                parts.append(tuple(float(v) for v in values[pos:pos + size]))
                pos += size
        return cls(
            beta1=parts[0], gamma1=parts[1], beta2=parts[2], gamma2=parts[3],
            phi1=phi1, phi2=phi2,
        )

    @classmethod
    def from_named(cls, spec: ModelSpec, values: Dict[str, float]) -> "ParamVector":
        """Build from coefficient names; missing coefficients default to 0"""
        known = set(spec.coefficient_names()) | {"phi1", "phi2"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown coefficient names: {unknown}")
        flat = [float(values.get(name, 0.0)) for name in spec.coefficient_names()]
        return cls.unflatten(
            spec, flat,
            phi1=float(values.get("phi1", 1.0)),
            phi2=float(values.get("phi2", 1.0)),
        )

    def named(self, spec: ModelSpec) -> Dict[str, float]:
        return dict(zip(spec.coefficient_names(), self.flatten().tolist()))

    def with_dispersions(self, phi1: float, phi2: float) -> "ParamVector":
        return self.model_copy(update={"phi1": float(phi1), "phi2": float(phi2)})


def check_domain(values: Tuple[float, ...], domain: SeriesDomain, series: int) -> None:
    arr = np.asarray(values, dtype=float)
    finite = np.isfinite(arr)
    if domain == SeriesDomain.UNIT_INTERVAL:
        ok = finite & (arr >= 0.0) & (arr <= 1.0)
    elif domain == SeriesDomain.NONNEGATIVE_COUNT:
        ok = finite & (arr >= 0.0) & (np.floor(arr) == arr)
    elif domain == SeriesDomain.POSITIVE_REAL:
        ok = finite & (arr > 0.0)
    else:
        ok = finite
    if not ok.all():
        idx = int(np.argmin(ok))
        raise DomainViolation(
            f"series {series} value {arr[idx]} at index {idx} is outside domain '{domain.value}'",
            series=series, index=idx, value=float(arr[idx]), domain=domain.value,
        )


class BivariateSeries(BaseModel):
    """Two aligned observation sequences with their domains"""

    model_config = ConfigDict(frozen=True)

    y1: Tuple[float, ...]
    y2: Tuple[float, ...]
    domain1: SeriesDomain
    domain2: SeriesDomain
    labels: Optional[Tuple[str, ...]] = None

    @model_validator(mode="after")
    def _check(self):
        if len(self.y1) != len(self.y2):
            raise ValueError(f"series lengths differ: {len(self.y1)} vs {len(self.y2)}")
        if self.labels is not None and len(self.labels) != len(self.y1):
            raise ValueError("labels must have one entry per observation")
        check_domain(self.y1, self.domain1, 1)
        check_domain(self.y2, self.domain2, 2)
        return self

    @property
    def n(self) -> int:
        return len(self.y1)

    def values(self, j: int) -> np.ndarray:
        return np.asarray(self.y1 if j == 1 else self.y2, dtype=float)

    def domain(self, j: int) -> SeriesDomain:
        return self.domain1 if j == 1 else self.domain2

    def head(self, length: int) -> "BivariateSeries":
        """First `length` observations"""
        return BivariateSeries(
            y1=self.y1[:length],
            y2=self.y2[:length],
            domain1=self.domain1,
            domain2=self.domain2,
            labels=None if self.labels is None else self.labels[:length],
        )


_LINK_DOMAINS = {
    LinkKind.LOGIT: {SeriesDomain.UNIT_INTERVAL},
    LinkKind.LOG: {SeriesDomain.NONNEGATIVE_COUNT, SeriesDomain.POSITIVE_REAL, SeriesDomain.UNIT_INTERVAL},
    LinkKind.IDENTITY: set(SeriesDomain),
}

_VARIANCE_DOMAINS = {
    VarianceKind.CONSTANT: set(SeriesDomain),
    VarianceKind.LINEAR: {SeriesDomain.NONNEGATIVE_COUNT, SeriesDomain.POSITIVE_REAL, SeriesDomain.UNIT_INTERVAL},
    VarianceKind.BERNOULLI_LIKE: {SeriesDomain.UNIT_INTERVAL},
    VarianceKind.QUADRATIC: {SeriesDomain.NONNEGATIVE_COUNT, SeriesDomain.POSITIVE_REAL, SeriesDomain.UNIT_INTERVAL},
}


@dataclass(frozen=True)
class ModelContext:
    """
    A model spec bound to data. Holds the per-equation design matrices
    (rows t = m+1..n, columns intercept, own lags, cross lags) and responses.
    """

    spec: ModelSpec
    data: BivariateSeries
    m: int
    designs: Tuple[np.ndarray, np.ndarray]
    responses: Tuple[np.ndarray, np.ndarray]
    transformed: Tuple[np.ndarray, np.ndarray]
    boundary_clamped: Tuple[bool, bool]

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def n_eff(self) -> int:
        return self.n - self.m

    def design(self, j: int) -> np.ndarray:
        return self.designs[j - 1]

    def response(self, j: int) -> np.ndarray:
        return self.responses[j - 1]


def validate_spec(
    spec: ModelSpec, data: BivariateSeries, m: Optional[int] = None
) -> ModelContext:
    """
    Bind a model spec to data.

    `m` may be raised above spec.m so that nested models (e.g. a restricted
    Granger fit) condition on the same leading observations.
    """
    from app.quasi_likelihood import build_design, transform_series

    for j in (1, 2):
        eq = spec.equation(j)
        domain = data.domain(j)
        if domain not in _LINK_DOMAINS[eq.link.kind]:
            raise IncompatibleLinkDomain(
                f"equation {j}: {eq.link.kind.value} link is incompatible with '{domain.value}' data",
                equation=j, link=eq.link.kind.value, domain=domain.value,
            )
        if domain not in _VARIANCE_DOMAINS[eq.variance.kind]:
            raise IncompatibleLinkDomain(
                f"equation {j}: {eq.variance.kind.value} variance is incompatible with '{domain.value}' data",
                equation=j, variance=eq.variance.kind.value, domain=domain.value,
            )
        if (
            eq.link.kind == LinkKind.LOG
            and eq.link.transform_kind == TransformKind.SAME_AS_LINK
            and domain == SeriesDomain.NONNEGATIVE_COUNT
        ):
            raise IncompatibleLinkDomain(
                f"equation {j}: log transform of counts needs the log1p transform",
                equation=j, link=eq.link.kind.value, domain=domain.value,
            )

    m_used = spec.m if m is None else max(int(m), spec.m)
    needed = m_used + spec.n_coefficients
    if data.n <= needed:
        raise SeriesTooShort(
            f"series of length {data.n} is too short: need more than {needed} observations",
            n=data.n, m=m_used, required=needed + 1,
        )

    t1, clamped1 = transform_series(data.values(1), spec.eq1.link, report=True)
    t2, clamped2 = transform_series(data.values(2), spec.eq2.link, report=True)
    if clamped1 or clamped2:
        logger.warning(
            f"⚠️ Boundary clamping applied to lagged values (series 1: {clamped1}, series 2: {clamped2})"
        )

    x1 = build_design(t1, t2, spec.eq1.own_lags, spec.eq1.cross_lags, m_used)
    x2 = build_design(t2, t1, spec.eq2.own_lags, spec.eq2.cross_lags, m_used)
    for arr in (t1, t2, x1, x2):
        arr.setflags(write=False)
    r1 = data.values(1)[m_used:]
    r2 = data.values(2)[m_used:]
    r1.setflags(write=False)
    r2.setflags(write=False)
    return ModelContext(
        spec=spec,
        data=data,
        m=m_used,
        designs=(x1, x2),
        responses=(r1, r2),
        transformed=(t1, t2),
        boundary_clamped=(bool(clamped1), bool(clamped2)),
    )
