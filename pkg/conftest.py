"""
Shared fixtures: small problem builders used across the test modules
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.cones import ControlSet
from core.families import build_family
from core.forward import ProblemSpec
from core.hilbert import TruncatedSpace

ADDITIVE_PARAMS = {
    'B': [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, -0.3]],
    'sigma': [[0.3, 0.0], [0.0, 0.3], [0.1, 0.1], [0.0, 0.2]],
    'M': np.eye(4).tolist(),
    'R': np.eye(2).tolist(),
    'G': np.eye(4).tolist(),
}
ADDITIVE_X0 = [1.0, 0.5, -0.5, 0.25]

MULTIPLICATIVE_PARAMS = {
    'B': [[1.0], [0.5]],
    'C': [[[0.3, 0.0], [0.1, 0.2]]],
    'D': [[[0.2], [0.1]]],
    'sigma': [[0.1], [0.1]],
    'M': np.eye(2).tolist(),
    'R': [[1.0]],
    'G': np.eye(2).tolist(),
}


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-scale Monte Carlo runs (P=8192)')


def _make_spec(family='lq', n=2, m=1, d=1, params=None, control_set=None, eigenvalues=None, x0=None,
               horizon=1.0):
    space = TruncatedSpace(n=n, eigenvalues=tuple(eigenvalues)) if eigenvalues is not None \
        else TruncatedSpace.dirichlet(n)
    return ProblemSpec(space=space, m=m, d=d, family=build_family(family, n, m, d, params or {}),
                       control_set=control_set or ControlSet.unconstrained(d), horizon=horizon,
                       x0=np.zeros(n) if x0 is None else np.asarray(x0, dtype=float))


@pytest.fixture
def make_spec():
    """Factory for ProblemSpec instances."""
    return _make_spec


@pytest.fixture
def additive_spec():
    """Additive-noise LQ problem, n=4, m=2, d=2, T=1, U = R^2."""
    return _make_spec('lq', 4, 2, 2, ADDITIVE_PARAMS, x0=ADDITIVE_X0)


@pytest.fixture
def multiplicative_spec():
    """LQ problem with state- and control-dependent noise, n=2, m=1, d=1."""
    return _make_spec('lq', 2, 1, 1, MULTIPLICATIVE_PARAMS, x0=[1.0, -0.5])
