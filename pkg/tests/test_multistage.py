import math

import numpy as np
import pytest

from odesplit.expr import Const, Mul, Neg, RhsSystem, State
from odesplit.kernel import compile_kernel
from odesplit.linalg import SingularPivotError
from odesplit.models import analytic_problems
from odesplit.multistage import (
    DENSE_CAP,
    NewtonNonconvergenceError,
    NewtonParams,
    StageWorkspace,
    newton_solve,
    stage_update,
    step,
    step_batch,
)
from odesplit.tableau import BUILTIN_NAMES, builtin


@pytest.fixture(scope="module")
def decay_kernel():
    return compile_kernel(RhsSystem("lin", ("y",), (Neg(State(0)),)))


@pytest.fixture(scope="module")
def quad_kernel():
    y = State(0)
    return compile_kernel(RhsSystem("quad", ("y",), (Neg(Mul(y, y)),)))


def test_explicit_euler_example(decay_kernel):
    y1, stats = step(decay_kernel, builtin("explicit-euler"), np.array([1.0]), 0.0, 0.1)
    assert y1[0] == pytest.approx(0.9, abs=0)
    assert stats.lu_factorizations == 0


def test_crank_nicolson_example(decay_kernel):
    y1, _ = step(decay_kernel, builtin("crank-nicolson"), np.array([1.0]), 0.0, 0.1)
    assert y1[0] == pytest.approx(0.95 / 1.05, abs=1e-11)


def run_to_time(kernel, tab, y0, horizon, kappa, newton=None):
    y = np.asarray(y0, dtype=float)
    t = 0.0
    for _ in range(round(horizon / kappa)):
        y, stats = step(kernel, tab, y, t, kappa, newton=newton)
        t += kappa
    return y, stats


def richardson_orders(kernel, tab, problem, ladder):
    errs = []
    for kappa in ladder:
        y, _ = run_to_time(kernel, tab, problem.y0, problem.horizon, kappa)
        errs.append(abs(y[0] - problem.exact(problem.horizon)[0]))
    return [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]


def test_esdirk4_order_four(quad_kernel):
    problem = analytic_problems()["decay-quadratic"]
    orders = richardson_orders(quad_kernel, builtin("esdirk4"), problem, (0.1, 0.05, 0.025))
    assert abs(orders[-1] - 4.0) <= 0.15


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_declared_order_observed(name, quad_kernel):
    problem = analytic_problems()["decay-quadratic"]
    tab = builtin(name)
    orders = richardson_orders(quad_kernel, tab, problem, (0.1, 0.05, 0.025))
    assert abs(orders[-1] - tab.order) <= 0.15


def test_newton_affine_single_iteration():
    x, iters = newton_solve(lambda k: k - 2.0, lambda k: np.eye(1), np.array([0.0]))
    assert x[0] == pytest.approx(2.0, abs=1e-14)
    assert iters == 1


def test_newton_quadratic_convergence():
    x, iters = newton_solve(
        lambda k: k * k - 4.0, lambda k: np.array([[2.0 * k[0]]]), np.array([3.0])
    )
    assert abs(x[0] - 2.0) <= 1e-10
    assert iters <= 6


def test_newton_converged_guess_short_circuits():
    # r(k) = k^3 at guess 0: the guess is the root, so no Jacobian is needed
    x, iters = newton_solve(
        lambda k: k**3, lambda k: np.array([[3.0 * k[0] ** 2]]), np.array([0.0])
    )
    assert x[0] == 0.0 and iters == 0


def test_newton_singular_jacobian():
    # nonzero residual with a singular Jacobian at the iterate
    with pytest.raises(SingularPivotError):
        newton_solve(
            lambda k: k**3 + 1.0,
            lambda k: np.array([[3.0 * k[0] ** 2]]),
            np.array([0.0]),
        )


def test_newton_nonconvergence_error():
    with pytest.raises(NewtonNonconvergenceError):
        newton_solve(
            lambda k: np.array([1.0 + k[0] ** 2]),  # no real root
            lambda k: np.array([[2.0 * k[0] + 1e-3]]),
            np.array([0.5]),
            NewtonParams(max_iter=8),
        )


def test_dense_cap_enforced(decay_kernel):
    with pytest.raises(ValueError):
        newton_solve(lambda k: k, lambda k: np.eye(DENSE_CAP + 1), np.zeros(DENSE_CAP + 1))


def test_explicit_stages_zero_lu(quad_kernel):
    _, stats = step(quad_kernel, builtin("rk4"), np.array([1.0]), 0.0, 0.1)
    assert stats.lu_factorizations == 0
    assert all(not s.implicit for s in stats.per_stage)


def test_implicit_stage_stats(quad_kernel):
    _, stats = step(quad_kernel, builtin("esdirk4"), np.array([1.0]), 0.0, 0.1)
    assert stats.per_stage[0].implicit is False
    assert stats.lu_factorizations > 0
    assert stats.newton_iterations > 0


def test_linear_autonomous_single_refresh_across_steps(decay_kernel):
    tab = builtin("crank-nicolson")
    newton = NewtonParams(jacobian_reuse="reuse-across-steps-until-slow")
    ws = StageWorkspace(decay_kernel, tab, 1)
    y = np.array([[1.0]])
    refreshes = 0
    t = 0.0
    for _ in range(40):
        y, stats = step_batch(decay_kernel, tab, y, t, 0.1, newton=newton, workspace=ws)
        refreshes += stats.jacobian_refreshes
        t += 0.1
    assert refreshes <= 1


def test_stage_update_bitwise(rng):
    y0 = rng.standard_normal((3, 5))
    k = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    kappa = 0.37
    acc = np.zeros_like(y0)
    for i in range(4):
        acc += (kappa * b[i]) * k[i]
    assert np.array_equal(stage_update(y0, kappa, b, k), y0 + acc)


def test_step_rejects_nonpositive_kappa(decay_kernel):
    with pytest.raises(ValueError):
        step(decay_kernel, builtin("explicit-euler"), np.array([1.0]), 0.0, 0.0)


def test_nonconvergence_reports_stage_and_point():
    # brutally stiff blow-up problem with a huge step defeats Newton
    y = State(0)
    sys = RhsSystem("hard", ("y",), (Mul(Const(1e8), Mul(Mul(y, y), y)),))
    kern = compile_kernel(sys)
    with pytest.raises(NewtonNonconvergenceError) as err:
        step_batch(
            kern, builtin("implicit-euler"), np.array([[1.0, 2.0]]), 0.0, 10.0,
            newton=NewtonParams(max_iter=5),
        )
    assert err.value.stage == 0
    assert err.value.point is not None


def test_capture_returns_stage_data(quad_kernel):
    capture = {}
    tab = builtin("esdirk3")
    y1, _ = step_batch(quad_kernel, tab, np.array([[1.0]]), 0.0, 0.2, capture=capture)
    assert capture["k"].shape == (tab.s, 1, 1)
    assert capture["w"].shape == (tab.s, 1, 1)
    # final update reproducible from captured stage values
    assert np.array_equal(stage_update(np.array([[1.0]]), 0.2, tab.b, capture["k"]), y1)
