"""
Shared fixtures: simulated trajectories from the preset configurations
"""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from app.estimation_service import fit_qmle
from app.models import validate_spec
from app.simulation_service import configuration, simulate_trajectory


def simulate(config, n, seed, burn_in=200):
    return simulate_trajectory(
        config.spec, config.theta, config.families, n, burn_in=burn_in, rng=np.random.default_rng(seed)
    )


@pytest.fixture(scope="session")
def c1():
    return configuration("C1")


@pytest.fixture(scope="session")
def c1_series(c1):
    return simulate(c1, 400, seed=11)


@pytest.fixture(scope="session")
def c1_ctx(c1, c1_series):
    return validate_spec(c1.spec, c1_series)


@pytest.fixture(scope="session")
def c1_fit(c1_ctx):
    return fit_qmle(c1_ctx)


@pytest.fixture(scope="session")
def c1_long_fit(c1):
    series = simulate(c1, 2000, seed=23)
    return fit_qmle(validate_spec(c1.spec, series))
