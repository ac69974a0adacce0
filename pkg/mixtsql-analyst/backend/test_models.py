"""
Tests for the model domain types and validate_spec
Run: pytest test_models.py
"""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import DomainViolation, IncompatibleLinkDomain, SeriesTooShort
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
from app.simulation_service import bounded_count_spec


def logit_eq(own=(1,), cross=(1,)):
    return EquationSpec(
        link=LinkFunction(kind=LinkKind.LOGIT),
        variance=VarianceFunction(kind=VarianceKind.BERNOULLI_LIKE),
        own_lags=own,
        cross_lags=cross,
    )


def count_eq(own=(1,), cross=(1,)):
    return EquationSpec(
        link=LinkFunction(kind=LinkKind.LOG, transform_kind=TransformKind.LOG_PLUS_ONE),
        variance=VarianceFunction(kind=VarianceKind.LINEAR),
        own_lags=own,
        cross_lags=cross,
    )


def mixed_series(n, seed=0):
    rng = np.random.default_rng(seed)
    return BivariateSeries(
        y1=tuple(rng.uniform(0.05, 0.95, n)),
        y2=tuple(float(v) for v in rng.poisson(3.0, n)),
        domain1=SeriesDomain.UNIT_INTERVAL,
        domain2=SeriesDomain.NONNEGATIVE_COUNT,
    )


# ---------------------------------------------------------------------------
# Lag sets and specs
# ---------------------------------------------------------------------------

def test_lags_parse_from_comma_string_and_sort():
    eq = logit_eq(own="5, 1,2", cross="")
    assert eq.own_lags == (1, 2, 5)
    assert eq.cross_lags == ()
    assert eq.n_coefficients == 4


@pytest.mark.parametrize("lags", [(1, 1), (0,), (-2,)])
def test_invalid_lag_sets_rejected(lags):
    with pytest.raises(ValidationError):
        logit_eq(own=lags)


def test_log_plus_one_only_with_log_link():
    with pytest.raises(ValidationError):
        LinkFunction(kind=LinkKind.LOGIT, transform_kind=TransformKind.LOG_PLUS_ONE)
    assert LinkFunction(kind=LinkKind.LOG, transform_kind=TransformKind.LOG_PLUS_ONE)


def test_m_is_largest_lag_with_floor_of_one():
    spec = ModelSpec(eq1=logit_eq(own=(1, 2, 5, 6), cross=()), eq2=count_eq(own=(2,), cross=(6,)))
    assert spec.m == 6
    intercepts_only = ModelSpec(eq1=logit_eq(own=(), cross=()), eq2=count_eq(own=(), cross=()))
    assert intercepts_only.m == 1


def test_coefficient_names_follow_flattening_order():
    spec = bounded_count_spec()
    assert spec.coefficient_names() == [
        "beta1_0", "beta1_l1", "gamma1_l1", "beta2_0", "beta2_l1", "gamma2_l1",
    ]


def test_variance_mean_domains():
    assert VarianceFunction(kind=VarianceKind.CONSTANT).mean_domain() == (-np.inf, np.inf)
    assert VarianceFunction(kind=VarianceKind.BERNOULLI_LIKE).mean_domain() == (0.0, 1.0)
    assert VarianceFunction(kind=VarianceKind.QUADRATIC).mean_domain() == (0.0, np.inf)


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------

def test_flatten_unflatten_round_trip():
    spec = ModelSpec(eq1=logit_eq(own=(1, 2), cross=(3,)), eq2=count_eq(own=(), cross=(1, 4)))
    theta = ParamVector(
        beta1=(0.1, 0.2, -0.3), gamma1=(0.4,), beta2=(1.5,), gamma2=(-0.6, 0.7), phi1=0.2, phi2=1.3
    )
    flat = theta.flatten()
    assert flat.tolist() == [0.1, 0.2, -0.3, 0.4, 1.5, -0.6, 0.7]
    again = ParamVector.unflatten(spec, flat, phi1=0.2, phi2=1.3)
    assert again == theta


def test_from_named_fills_missing_with_zero():
    spec = bounded_count_spec()
    theta = ParamVector.from_named(spec, {"beta1_0": 1.0, "gamma2_l1": -0.2, "phi1": 0.3})
    assert theta.flatten().tolist() == [1.0, 0.0, 0.0, 0.0, 0.0, -0.2]
    assert theta.phi1 == 0.3 and theta.phi2 == 1.0
    with pytest.raises(ValueError):
        ParamVector.from_named(spec, {"gamma3_l1": 1.0})


def test_dispersions_must_be_positive():
    with pytest.raises(ValidationError):
        ParamVector(beta1=(0.0,), beta2=(0.0,), phi1=0.0)


def test_conformance_check():
    spec = bounded_count_spec()
    assert not ParamVector(beta1=(0.0,), beta2=(0.0,)).conforms_to(spec)
    with pytest.raises(ValueError):
        ParamVector(beta1=(0.0,), beta2=(0.0,)).check_conforms(spec)


# ---------------------------------------------------------------------------
# BivariateSeries and validate_spec
# ---------------------------------------------------------------------------

def test_count_domain_violation_reports_index():
    with pytest.raises(DomainViolation) as info:
        BivariateSeries(
            y1=(0.2, 0.3, 0.4), y2=(1.0, -1.0, 2.0),
            domain1=SeriesDomain.UNIT_INTERVAL, domain2=SeriesDomain.NONNEGATIVE_COUNT,
        )
    assert info.value.context["series"] == 2
    assert info.value.context["index"] == 1


def test_non_integer_count_rejected():
    with pytest.raises(DomainViolation):
        BivariateSeries(
            y1=(0.2, 0.3), y2=(1.5, 2.0),
            domain1=SeriesDomain.UNIT_INTERVAL, domain2=SeriesDomain.NONNEGATIVE_COUNT,
        )


def test_validate_sparse_reduced_model_on_112_weeks():
    spec = ModelSpec(eq1=logit_eq(own=(1, 2, 5, 6), cross=()), eq2=count_eq(own=(2,), cross=(6,)))
    ctx = validate_spec(spec, mixed_series(112))
    assert ctx.m == 6
    assert ctx.n_eff == 106
    assert ctx.design(1).shape == (106, 5)
    assert ctx.design(2).shape == (106, 3)
    assert np.array_equal(ctx.response(2), np.asarray(mixed_series(112).y2)[6:])


def test_design_uses_transformed_lags():
    data = mixed_series(20, seed=3)
    ctx = validate_spec(ModelSpec(eq1=logit_eq(), eq2=count_eq()), data)
    y1, y2 = data.values(1), data.values(2)
    # row for t = 2 (0-based index 1)
    assert ctx.design(1)[0].tolist() == pytest.approx([1.0, np.log(y1[0] / (1 - y1[0])), np.log1p(y2[0])])
    assert ctx.design(2)[0].tolist() == pytest.approx([1.0, np.log1p(y2[0]), np.log(y1[0] / (1 - y1[0]))])


def test_logit_link_on_counts_is_incompatible():
    spec = ModelSpec(eq1=logit_eq(), eq2=logit_eq())
    with pytest.raises(IncompatibleLinkDomain):
        validate_spec(spec, mixed_series(50))


def test_bernoulli_variance_on_counts_is_incompatible():
    eq2 = EquationSpec(
        link=LinkFunction(kind=LinkKind.IDENTITY),
        variance=VarianceFunction(kind=VarianceKind.BERNOULLI_LIKE),
        own_lags=(1,),
    )
    with pytest.raises(IncompatibleLinkDomain):
        validate_spec(ModelSpec(eq1=logit_eq(), eq2=eq2), mixed_series(50))


def test_log_of_counts_requires_log1p():
    eq2 = EquationSpec(
        link=LinkFunction(kind=LinkKind.LOG),
        variance=VarianceFunction(kind=VarianceKind.LINEAR),
        own_lags=(1,),
    )
    with pytest.raises(IncompatibleLinkDomain):
        validate_spec(ModelSpec(eq1=logit_eq(), eq2=eq2), mixed_series(50))


def test_series_of_length_m_is_too_short():
    spec = ModelSpec(eq1=logit_eq(own=(1, 2, 3)), eq2=count_eq())
    with pytest.raises(SeriesTooShort):
        validate_spec(spec, mixed_series(3))


@pytest.mark.parametrize("n", [6, 7])
def test_series_must_exceed_m_plus_all_coefficients(n):
    # m = 1 and 3 + 3 coefficients
    spec = ModelSpec(eq1=logit_eq(), eq2=count_eq())
    with pytest.raises(SeriesTooShort) as info:
        validate_spec(spec, mixed_series(n))
    assert info.value.context["required"] == 8


def test_shortest_accepted_series():
    ctx = validate_spec(ModelSpec(eq1=logit_eq(), eq2=count_eq()), mixed_series(8))
    assert ctx.n_eff == 7


def test_validate_spec_is_idempotent_and_read_only():
    spec = ModelSpec(eq1=logit_eq(), eq2=count_eq(own=(1, 2)))
    data = mixed_series(60, seed=5)
    first = validate_spec(spec, data)
    second = validate_spec(spec, data)
    for j in (1, 2):
        assert np.array_equal(first.design(j), second.design(j))
        assert np.array_equal(first.response(j), second.response(j))
    with pytest.raises(ValueError):
        first.design(1)[0, 0] = 5.0


def test_restricted_spec_keeps_conditioning_window():
    spec = ModelSpec(eq1=logit_eq(), eq2=count_eq(own=(1,), cross=(4,)))
    data = mixed_series(60)
    ctx = validate_spec(spec, data)
    restricted = validate_spec(spec.restricted(2), data, m=ctx.m)
    assert restricted.m == ctx.m == 4
    assert restricted.spec.eq2.cross_lags == ()
    assert np.array_equal(restricted.response(2), ctx.response(2))
