import math

import numpy as np
import pytest

from odesplit.expr import Mul, Neg, Param, RhsSystem, State
from odesplit.kernel import compile_kernel
from odesplit.models import mito_system
from odesplit.multistage import NewtonParams
from odesplit.pointcloud import PointOdeSolver, PointSet, StateField
from odesplit.rushlarsen import make_rl_scheme, rl_step_batch
from odesplit.sensitivity import (
    Control,
    Functional,
    OdeStepRecord,
    Tape,
    adj_step_multistage,
    adj_step_rl,
    adjoint_sweep,
    reverse_sweep,
    taylor_test,
    tlm_step_multistage,
    tlm_step_rl,
    tlm_sweep,
)
from odesplit.steppers import SCHEME_NAMES, make_stepper
from odesplit.tableau import builtin

KAPPA = 0.02


def build_ode_tape(kernel, scheme, data0, steps=50, kappa=KAPPA, params=None):
    stepper = make_stepper(scheme, kernel, NewtonParams(tol=1e-12))
    solver = PointOdeSolver(stepper, PointSet(np.zeros(data0.shape[1])))
    if params is not None:
        solver.params = np.asarray(params, dtype=float)
    fld = StateField(data0.copy(), 0.0)
    tape = Tape()
    tape.record_initial(fld)
    t = 0.0
    for _ in range(steps):
        tape.append(OdeStepRecord(solver, t, kappa, fld.data, t + kappa))
        fld, _ = solver.step_all(fld, t, kappa, fresh_jacobians=True)
        t += kappa
    tape.finish(fld)
    return tape, fld


def test_tlm_explicit_euler_scalar(linear_scalar):
    _, kernel = linear_scalar
    ydot = np.array([[2.0]])
    out = tlm_step_multistage(
        kernel, builtin("explicit-euler"), np.array([[1.5]]), ydot, 0.0, 0.1,
        params=np.array([-1.0]),
    )
    assert out[0, 0] == pytest.approx((1 - 0.1) * 2.0, rel=1e-14)


def test_adj_explicit_euler_scalar(linear_scalar):
    _, kernel = linear_scalar
    ybar = np.array([[3.0]])
    out, _ = adj_step_multistage(
        kernel, builtin("explicit-euler"), np.array([[1.5]]), ybar, 0.0, 0.1,
        params=np.array([-1.0]),
    )
    assert out[0, 0] == pytest.approx((1 - 0.1) * 3.0, rel=1e-14)


def test_zero_direction_zero_seed_gives_zero(fhn_like):
    _, kernel = fhn_like
    zero = np.zeros((2, 3))
    out = tlm_step_multistage(
        kernel, builtin("esdirk3"), np.full((2, 3), 0.3), zero, 0.0, 0.1
    )
    assert np.array_equal(out, zero)
    out, mbar = adj_step_multistage(
        kernel, builtin("esdirk3"), np.full((2, 3), 0.3), zero, 0.0, 0.1,
        want_params=True,
    )
    assert np.array_equal(out, zero)
    assert np.array_equal(mbar, np.zeros(kernel.p))


def test_grl1_adjoint_is_exact_linear_propagator(linear_scalar):
    _, kernel = linear_scalar
    scheme = make_rl_scheme("grl1", kernel)
    lam, kappa = -2.0, 0.25
    ybar = np.array([[1.0]])
    out, _ = adj_step_rl(
        scheme, np.array([[0.7]]), ybar, 0.0, kappa, params=np.array([lam])
    )
    assert out[0, 0] == pytest.approx(math.exp(kappa * lam), rel=1e-12)


def test_rl_kappa_zero_identity(fhn_like):
    _, kernel = fhn_like
    scheme = make_rl_scheme("grl2", kernel)
    y = np.full((2, 4), 0.4)
    d = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(tlm_step_rl(scheme, y, d, 0.0, 0.0), d)
    out, _ = adj_step_rl(scheme, y, d, 0.0, 0.0)
    assert np.array_equal(out, d)


@pytest.mark.parametrize("scheme", SCHEME_NAMES)
def test_duality_every_scheme(scheme, fhn_like, rng):
    _, kernel = fhn_like
    data0 = rng.standard_normal((2, 3)) * 0.2 + np.array([[0.3], [0.1]])
    tape, fld = build_ode_tape(kernel, scheme, data0)
    ydot0 = rng.standard_normal((2, 3))
    mdot = {"a": 0.7, "c2": -0.3, "b": 0.2}
    ybar_t = rng.standard_normal((2, 3))
    ydot_t, _ = tlm_sweep(tape, ydot0, mdot)
    ybar0, partials = adjoint_sweep(tape, terminal=ybar_t, want_params=True)
    lhs = float(np.sum(ybar_t * ydot_t))
    rhs = float(np.sum(ybar0 * ydot0)) + sum(partials[n] * mdot[n] for n in mdot)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def assemble_tlm_matrix(apply_fn, m):
    cols = []
    for j in range(m):
        e = np.zeros((m, 1))
        e[j, 0] = 1.0
        cols.append(apply_fn(e)[:, 0])
    return np.column_stack(cols)


def test_adjoint_is_exact_transpose_for_linear_system():
    # 2-component linear autonomous system with coupling
    a, b = State(0), State(1)
    sys = RhsSystem(
        "lin2", ("a", "b"),
        (-1.0 * a + 0.5 * b, 0.25 * a + -2.0 * b),
    )
    kernel = compile_kernel(sys)
    y = np.array([[0.4], [0.9]])
    for scheme_name in ("crank-nicolson", "esdirk4", "grl1", "grl2"):
        if scheme_name in ("grl1", "grl2"):
            scheme = make_rl_scheme(scheme_name, kernel)
            tlm = lambda d: tlm_step_rl(scheme, y, d, 0.0, 0.1)
            adj = lambda d: adj_step_rl(scheme, y, d, 0.0, 0.1)[0]
        else:
            tab = builtin(scheme_name)
            tlm = lambda d: tlm_step_multistage(kernel, tab, y, d, 0.0, 0.1)
            adj = lambda d: adj_step_multistage(kernel, tab, y, d, 0.0, 0.1)[0]
        t_mat = assemble_tlm_matrix(tlm, 2)
        a_mat = assemble_tlm_matrix(adj, 2)
        assert np.abs(a_mat - t_mat.T).max() <= 1e-12


def test_tlm_vs_central_difference_fhn(fhn_like, rng):
    sys, kernel = fhn_like
    data0 = np.array([[0.35, 0.2], [0.05, 0.12]])
    tape, _ = build_ode_tape(kernel, "esdirk3", data0, steps=10, kappa=0.05)
    # J = sum of squares of the final state (point sum)
    v, s = State(0), State(1)
    functional = Functional(v * v + s * s)
    delta = rng.standard_normal(data0.shape)
    _, jdot = tlm_sweep(tape, delta, None, functional=functional)

    stepper = make_stepper("esdirk3", kernel, NewtonParams(tol=1e-12))
    def j_of(pert):
        solver = PointOdeSolver(stepper, PointSet(np.zeros(2)))
        fld = StateField(data0 + pert, 0.0)
        t = 0.0
        for _ in range(10):
            fld, _ = solver.step_all(fld, t, 0.05)
            t += 0.05
        return functional.value_at(fld.data)

    h = 1e-5
    fd = (j_of(h * delta) - j_of(-h * delta)) / (2 * h)
    assert jdot == pytest.approx(fd, rel=1e-6)


def test_grl2_step_map_columns_vs_finite_differences():
    sys = mito_system()
    kernel = compile_kernel(sys)
    scheme = make_rl_scheme("grl2", kernel)
    y0 = np.array([[60.0], [0.7], [0.2], [0.1]])
    kappa = 0.25
    h = 1e-6
    for j in range(4):
        e = np.zeros((4, 1))
        e[j, 0] = 1.0
        tlm_col = tlm_step_rl(scheme, y0, e, 0.0, kappa)[:, 0]
        yp = rl_step_batch(scheme, y0 + h * e, 0.0, kappa)
        ym = rl_step_batch(scheme, y0 - h * e, 0.0, kappa)
        fd_col = (yp - ym)[:, 0] / (2 * h)
        scale = max(1.0, np.abs(fd_col).max())
        assert np.abs(tlm_col - fd_col).max() <= 1e-6 * scale


def test_reverse_sweep_assign_only():
    # tape with no steps: J = sum y^2/2 at t=0 over the point measure
    fld = StateField(np.array([[1.0, -2.0, 0.5]]), 0.0)
    tape = Tape()
    tape.record_initial(fld)
    tape.finish(fld)
    y = State(0)
    functional = Functional(0.5 * y * y, times=(0.0,))
    tape.register_functional(functional)
    grads = reverse_sweep(tape, functional, Control("y0", "initial-field", 0))
    assert np.allclose(grads["y0"], fld.data[0], atol=0)


def test_reverse_sweep_two_euler_steps(linear_scalar):
    _, kernel = linear_scalar
    lam, kappa = -1.0, 0.1
    tape, fld = build_ode_tape(
        kernel, "explicit-euler", np.array([[1.0]]), steps=2, kappa=kappa,
        params=[lam],
    )
    functional = Functional(State(0))  # J = y(T)
    grads = reverse_sweep(tape, functional, Control("y0", "initial-field", 0))
    assert grads["y0"][0] == pytest.approx((1 + kappa * lam) ** 2, rel=1e-14)


def test_gradient_of_independent_control_is_exactly_zero(fhn_like, rng):
    sys, kernel = fhn_like
    # add an inert parameter by rebuilding the system
    sys2 = RhsSystem(
        sys.name, sys.state_names, sys.exprs,
        sys.param_names + ("inert",), sys.param_defaults + (0.0,),
    )
    kernel2 = compile_kernel(sys2)
    data0 = rng.standard_normal((2, 4)) * 0.1 + 0.3
    tape, _ = build_ode_tape(kernel2, "grl1", data0, steps=5)
    functional = Functional(State(0))
    grads = reverse_sweep(
        tape, functional,
        [Control("inert", "scalar-parameter"), Control("a", "scalar-parameter")],
    )
    assert grads["inert"] == 0.0
    assert grads["a"] != 0.0


def test_taylor_quadratic_exact_order_two():
    j = lambda h: (2.0 + h * 0.5) ** 2
    report = taylor_test(j, 4.0, 2 * 2.0 * 0.5, [0.1, 0.05, 0.025])
    for order in report.r1_orders[1:]:
        assert order == pytest.approx(2.0, abs=1e-6)


def test_taylor_linear_saturates():
    j = lambda h: 3.0 * (1.0 + h)
    report = taylor_test(j, 3.0, 3.0, [0.1, 0.05, 0.025])
    assert report.saturated


def test_taylor_needs_three_rungs():
    with pytest.raises(ValueError):
        taylor_test(lambda h: h, 0.0, 1.0, [0.1, 0.05])


def test_replay_is_bitwise(fhn_like, rng):
    _, kernel = fhn_like
    data0 = rng.standard_normal((2, 5)) * 0.1 + 0.3
    tape, fld = build_ode_tape(kernel, "esdirk4", data0, steps=8, kappa=0.05)
    assert np.array_equal(tape.replay(), tape.final_state)


def test_functional_time_validation(fhn_like, rng):
    _, kernel = fhn_like
    data0 = rng.standard_normal((2, 2)) * 0.1
    tape, _ = build_ode_tape(kernel, "explicit-euler", data0, steps=4, kappa=0.25)
    good = Functional(State(0), times=(0.5, 1.0))
    tape.register_functional(good)
    bad = Functional(State(0), times=(0.33,))
    with pytest.raises(ValueError):
        tape.register_functional(bad)


def test_interior_time_injection_matches_fd(fhn_like, rng):
    _, kernel = fhn_like
    data0 = np.array([[0.4, 0.3], [0.1, 0.0]])
    tape, _ = build_ode_tape(kernel, "crank-nicolson", data0, steps=8, kappa=0.125)
    v = State(0)
    functional = Functional(v * v, times=(0.25, 0.75, 1.0))
    tape.register_functional(functional)
    grads = reverse_sweep(tape, functional, Control("v0", "initial-field", 0))

    stepper = make_stepper("crank-nicolson", kernel, NewtonParams(tol=1e-12))
    def j_of(pert0):
        solver = PointOdeSolver(stepper, PointSet(np.zeros(2)))
        fld = StateField(data0.copy(), 0.0)
        fld.data[0] += pert0
        total, t = 0.0, 0.0
        for _ in range(8):
            fld, _ = solver.step_all(fld, t, 0.125)
            t += 0.125
            if any(abs(t - ts) < 1e-12 for ts in (0.25, 0.75, 1.0)):
                total += functional.value_at(fld.data)
        return total

    delta = rng.standard_normal(2)
    h = 1e-6
    fd = (j_of(h * delta) - j_of(-h * delta)) / (2 * h)
    assert float(grads["v0"] @ delta) == pytest.approx(fd, rel=1e-6)


def test_run_ode_only_records_and_replays(fhn_like, rng):
    from odesplit.splitting import run_ode_only

    _, kernel = fhn_like
    stepper = make_stepper("grl2", kernel)
    solver = PointOdeSolver(stepper, PointSet(np.zeros(4)))
    fld = StateField(rng.standard_normal((2, 4)) * 0.1 + 0.3, 0.0)
    tape = Tape()
    out = run_ode_only(fld, 0.0, 12, 0.05, solver, tape)
    assert len(tape.records) == 12
    assert out.time == pytest.approx(0.6)
    assert np.array_equal(tape.replay(), tape.final_state)
