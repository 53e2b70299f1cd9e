import numpy as np
import pytest

from odesplit.expr import Param, RhsSystem, State
from odesplit.kernel import compile_kernel


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def fhn_like():
    """Small nonlinear two-component system with parameters, used across
    stepper and sensitivity tests."""
    v, s = State(0), State(1)
    a, c2, b = Param(0), Param(1), Param(2)
    sys = RhsSystem(
        "fhn-like",
        ("v", "s"),
        (a * v * (v - 0.13) * (1 - v) - c2 * s, b * (v - s)),
        ("a", "c2", "b"),
        (0.26, 0.1, 0.5),
    )
    return sys, compile_kernel(sys)


@pytest.fixture(scope="session")
def linear_scalar():
    sys = RhsSystem(
        "lin", ("y",), (Param(0) * State(0),), ("lam",), (-1.0,)
    )
    return sys, compile_kernel(sys)
