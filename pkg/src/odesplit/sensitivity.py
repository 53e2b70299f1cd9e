"""Tape-based recording of forward solves and exact discrete adjoint and
tangent-linear sweeps.

Every recorded step stores a checkpoint of its full entry state; internal
stage values are never stored and are recomputed during the sweeps, so the
reverse solve costs roughly one extra forward pass.  The adjoint of a step
is the exact transpose of its tangent linearization: both are built from
the same recomputed stage states and Jacobians, which makes the duality
identity <ybar_T, ydot_T> = <ybar_0, ydot_0> + <mbar, mdot> hold to
rounding.

Multistage steps propagate stage co-states by back-substitution through the
lower-triangular stage coupling; Rush-Larsen steps differentiate the update
map symbolically (including the diagonal-Jacobian dependence through the
exponential ramp and its derivative) and apply the resulting per-point
matrix or its transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import multistage
from .expr import Expr, State, differentiate, evaluate, simplify
from .linalg import lu_factor, lu_solve
from .multistage import NewtonParams
from .pointcloud import StateField
from .rushlarsen import RlScheme, phi, phi_prime, rl_step_batch
from .steppers import MultistageStepper

__all__ = [
    "Control",
    "Functional",
    "Tape",
    "InitialRecord",
    "OdeStepRecord",
    "PdeStepRecord",
    "tlm_step_multistage",
    "adj_step_multistage",
    "tlm_step_rl",
    "adj_step_rl",
    "adjoint_sweep",
    "tlm_sweep",
    "reverse_sweep",
    "taylor_test",
    "TaylorReport",
]


def _matvec(j, x):
    """j: (n, m, m), x: (m, n) -> (m, n)."""
    return np.einsum("nij,jn->in", j, x)


def _matvec_t(j, x):
    return np.einsum("nji,jn->in", j, x)


def _stage_data(kernel, tab, y_entry, t0, kappa, params, newton, want_params):
    """Recompute stage values/states from a checkpoint and evaluate the exact
    Jacobians there.  Returns (k, w, jac list, param-jac list)."""
    capture = {}
    multistage.step_batch(
        kernel, tab, y_entry, t0, kappa, params, newton=newton, capture=capture
    )
    k, w = capture["k"], capture["w"]
    jacs, pjacs = [], []
    for i in range(tab.s):
        t_i = t0 + tab.c[i] * kappa
        jacs.append(np.moveaxis(kernel.full_jac(w[i], t_i, params), 2, 0))
        pjacs.append(kernel.param_jac(w[i], t_i, params) if want_params else None)
    return k, w, jacs, pjacs


def tlm_step_multistage(kernel, tab, y_entry, ydot, t0, kappa, params=None,
                        mdot=None, newton: NewtonParams = None):
    """Tangent-linear step: propagate the direction ydot (m, n) through one
    multistage step recomputed from the checkpoint y_entry."""
    newton = newton or NewtonParams()
    _, _, jacs, pjacs = _stage_data(
        kernel, tab, y_entry, t0, kappa, params, newton, mdot is not None
    )
    s = tab.s
    m, n = ydot.shape
    kdot = np.empty((s, m, n))
    eye = np.arange(m)
    for i in range(s):
        acc = ydot.copy()
        for j in range(i):
            if tab.a[i, j] != 0.0:
                acc += (kappa * tab.a[i, j]) * kdot[j]
        rhs = _matvec(jacs[i], acc)
        if mdot is not None:
            rhs += np.einsum("ipn,p->in", pjacs[i], mdot)
        if tab.a[i, i] == 0.0:
            kdot[i] = rhs
        else:
            a_sys = (-kappa * tab.a[i, i]) * jacs[i]
            a_sys[:, eye, eye] += 1.0
            lu, piv = lu_factor(a_sys)
            kdot[i] = lu_solve(lu, piv, rhs.T).T
    return multistage.stage_update(ydot, kappa, tab.b, kdot)


def adj_step_multistage(kernel, tab, y_entry, ybar, t0, kappa, params=None,
                        newton: NewtonParams = None, want_params=False):
    """Adjoint step: pull the co-state ybar (m, n) back through one
    multistage step.  Returns (ybar_entry, mbar) with mbar (p,) or None."""
    newton = newton or NewtonParams()
    _, _, jacs, pjacs = _stage_data(
        kernel, tab, y_entry, t0, kappa, params, newton, want_params
    )
    s = tab.s
    m, n = ybar.shape
    kbar = np.empty((s, m, n))
    eye = np.arange(m)
    for i in range(s - 1, -1, -1):
        rhs = (kappa * tab.b[i]) * ybar
        for j in range(i + 1, s):
            if tab.a[j, i] != 0.0:
                rhs += (kappa * tab.a[j, i]) * _matvec_t(jacs[j], kbar[j])
        if tab.a[i, i] == 0.0:
            kbar[i] = rhs
        else:
            a_sys = (-kappa * tab.a[i, i]) * jacs[i]
            a_sys[:, eye, eye] += 1.0
            lu, piv = lu_factor(a_sys)
            kbar[i] = lu_solve(lu, piv, rhs.T, trans=True).T
    ybar_entry = ybar.copy()
    for i in range(s):
        ybar_entry += _matvec_t(jacs[i], kbar[i])
    mbar = None
    if want_params:
        mbar = np.zeros(kernel.p)
        for i in range(s):
            mbar += np.einsum("ipn,in->p", pjacs[i], kbar[i])
    return ybar_entry, mbar


# ---------------------------------------------------------------------------
# Rush-Larsen sensitivities


def _rl_layer(kernel, y, t, kappa_eff, params, flags, with_params=True):
    """Derivative of the one-sided exponential update L(y) = kappa_eff *
    f * phi(kappa_eff * Jd) (componentwise Euler where flags is False).

    Returns (d, p): d (n, m, m) = dL/dy, p (m, p, n) = dL/dm (None when the
    parameter block is not requested).
    """
    aux = kernel.aux_eval(y, t, params, with_params=with_params)
    f, jd, full, hh = aux["f"], aux["diag"], aux["full"], aux["ddiag_dy"]
    z = kappa_eff * jd
    ph = phi(z)
    fw = kappa_eff * kappa_eff * f * phi_prime(z)
    d = kappa_eff * ph[:, None, :] * full + fw[:, None, :] * hh
    p = None
    if with_params:
        dfp, djp = aux["df_dp"], aux["ddiag_dp"]
        p = kappa_eff * ph[:, None, :] * dfp + fw[:, None, :] * djp
    if flags is not None:
        sel = flags[:, None, None]
        d = np.where(sel, d, kappa_eff * full)
        if with_params:
            p = np.where(sel, p, kappa_eff * aux["df_dp"])
    return np.moveaxis(d, 2, 0), p


def _rl_full_layer(kernel, y0, yh, th, kappa, params, flags, with_params=True):
    """Derivatives of the second-stage update y1 = y0 + kappa * ftilde *
    phi(kappa*Jd(yh)) with ftilde = f(yh) + Jd(yh)*(y0 - yh), split into the
    sensitivity to yh (a), the direct diagonal sensitivity to y0 (bdiag) and
    the explicit parameter sensitivity (p, None when not requested)."""
    aux = kernel.aux_eval(yh, th, params, with_params=with_params)
    f, jd, full, hh = aux["f"], aux["diag"], aux["full"], aux["ddiag_dy"]
    m = kernel.m
    z = kappa * jd
    ph = phi(z)
    diff = y0 - yh
    ftilde = f + jd * diff
    fw = kappa * kappa * ftilde * phi_prime(z)
    a = kappa * ph[:, None, :] * (full + hh * diff[:, None, :]) + fw[:, None, :] * hh
    idx = np.arange(m)
    a[idx, idx, :] -= kappa * ph * jd
    bdiag = kappa * ph * jd
    p = None
    if with_params:
        dfp, djp = aux["df_dp"], aux["ddiag_dp"]
        p = kappa * ph[:, None, :] * (dfp + djp * diff[:, None, :]) + fw[:, None, :] * djp
    if flags is not None:
        sel = flags[:, None, None]
        a = np.where(sel, a, kappa * full)
        if with_params:
            p = np.where(sel, p, kappa * aux["df_dp"])
        bdiag = np.where(flags[:, None], bdiag, 0.0)
    return np.moveaxis(a, 2, 0), bdiag, p


def _rl_variant(scheme):
    flags = None if scheme.variant.startswith("g") else scheme.linear_flags
    two_stage = scheme.variant in ("rl2", "grl2")
    return flags, two_stage


def _rl_half_state(scheme, y_entry, t0, kappa, params):
    half_variant = "rl1" if scheme.variant == "rl2" else "grl1"
    half = RlScheme(half_variant, scheme.kernel, scheme.linear_flags)
    return rl_step_batch(half, y_entry, t0, 0.5 * kappa, params)


def tlm_step_rl(scheme, y_entry, ydot, t0, kappa, params=None, mdot=None):
    """Tangent-linear Rush-Larsen step (any variant) from the checkpoint."""
    if kappa == 0.0:
        return ydot.copy()
    kernel = scheme.kernel
    flags, two_stage = _rl_variant(scheme)
    wp = mdot is not None
    if not two_stage:
        d, p = _rl_layer(kernel, y_entry, t0, kappa, params, flags, wp)
        out = ydot + _matvec(d, ydot)
        if wp:
            out += np.einsum("ipn,p->in", p, mdot)
        return out
    half = 0.5 * kappa
    yh = _rl_half_state(scheme, y_entry, t0, kappa, params)
    dh, ph = _rl_layer(kernel, y_entry, t0, half, params, flags, wp)
    a, bdiag, pf = _rl_full_layer(kernel, y_entry, yh, t0 + half, kappa, params, flags, wp)
    yhdot = ydot + _matvec(dh, ydot)
    if wp:
        yhdot += np.einsum("ipn,p->in", ph, mdot)
    out = ydot + bdiag * ydot + _matvec(a, yhdot)
    if wp:
        out += np.einsum("ipn,p->in", pf, mdot)
    return out


def adj_step_rl(scheme, y_entry, ybar, t0, kappa, params=None, want_params=False):
    """Adjoint Rush-Larsen step: applies the exact transpose of the tangent
    map.  Returns (ybar_entry, mbar)."""
    if kappa == 0.0:
        return ybar.copy(), (np.zeros(scheme.kernel.p) if want_params else None)
    kernel = scheme.kernel
    flags, two_stage = _rl_variant(scheme)
    if not two_stage:
        d, p = _rl_layer(kernel, y_entry, t0, kappa, params, flags, want_params)
        out = ybar + _matvec_t(d, ybar)
        mbar = np.einsum("ipn,in->p", p, ybar) if want_params else None
        return out, mbar
    half = 0.5 * kappa
    yh = _rl_half_state(scheme, y_entry, t0, kappa, params)
    dh, ph = _rl_layer(kernel, y_entry, t0, half, params, flags, want_params)
    a, bdiag, pf = _rl_full_layer(
        kernel, y_entry, yh, t0 + half, kappa, params, flags, want_params
    )
    abar = _matvec_t(a, ybar)
    out = ybar + bdiag * ybar + abar + _matvec_t(dh, abar)
    mbar = None
    if want_params:
        mbar = np.einsum("ipn,in->p", pf, ybar) + np.einsum("ipn,in->p", ph, abar)
    return out, mbar


# ---------------------------------------------------------------------------
# controls and functionals


@dataclass(frozen=True)
class Control:
    """Differentiation target: a scalar parameter (of the ODE system or of a
    PDE operator) or the initial condition field of one state component."""

    name: str
    kind: str  # "scalar-parameter" | "initial-field"
    component: int = -1

    def __post_init__(self):
        if self.kind not in ("scalar-parameter", "initial-field"):
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.kind == "initial-field" and self.component < 0:
            raise ValueError("initial-field control needs a component index")


class Functional:
    """J = sum over sample times of sum_i w_i g(y(x_i, t)).

    kind "point-sum" uses unit weights (the point measure); "lumped-integral"
    weights by a lumped mass vector; times=None samples the final state only.
    """

    def __init__(self, integrand: Expr, times=None, weights=None,
                 name="J", kind=None):
        self.integrand = integrand
        self.times = None if times is None else tuple(float(t) for t in times)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.name = name
        self.kind = kind or ("point-sum" if weights is None else "lumped-integral")
        self._grad_exprs = {}

    def _gradient_expr(self, j):
        e = self._grad_exprs.get(j)
        if e is None:
            e = simplify(differentiate(self.integrand, State(j)))
            self._grad_exprs[j] = e
        return e

    def sample_times(self, final_time):
        return (final_time,) if self.times is None else self.times

    def value_at(self, state, params=np.zeros(0)):
        vals = evaluate(self.integrand, state, 0.0, params)
        vals = np.broadcast_to(vals, (state.shape[1],))
        if self.weights is not None:
            vals = vals * self.weights
        return float(np.sum(vals))

    def value(self, tape, params=np.zeros(0)):
        total = 0.0
        for t in self.sample_times(tape.final_time):
            total += self.value_at(tape.state_at(t), params)
        return total

    def seed(self, state, params=np.zeros(0)):
        """dJ/dy at one sampled state: (m, n) array."""
        m, n = state.shape
        out = np.zeros((m, n))
        for j in range(m):
            g = self._gradient_expr(j)
            vals = np.broadcast_to(evaluate(g, state, 0.0, params), (n,))
            out[j] = vals * self.weights if self.weights is not None else vals
        return out


# ---------------------------------------------------------------------------
# tape records


_TIME_TOL = 1e-9


class InitialRecord:
    def __init__(self, state, time):
        self.state = np.array(state, dtype=float)
        self.time = float(time)
        self.boundary_time = float(time)


class OdeStepRecord:
    def __init__(self, solver, t0, kappa, checkpoint, boundary_time=None):
        self.solver = solver
        self.t0 = float(t0)
        self.kappa = float(kappa)
        self.checkpoint = np.array(checkpoint, dtype=float)
        self.boundary_time = boundary_time

    def replay(self, state):
        fld, _ = self.solver.step_all(
            StateField(state, self.t0), self.t0, self.kappa, fresh_jacobians=True
        )
        return fld.data

    def _chunks(self):
        return self.solver.points.chunks()

    def tlm(self, ydot, mdot_vec):
        stepper = self.solver.stepper
        params = self.solver.params
        out = np.empty_like(ydot)
        for lo, hi in self._chunks():
            blk = self.checkpoint[:, lo:hi]
            dblk = ydot[:, lo:hi]
            if isinstance(stepper, MultistageStepper):
                out[:, lo:hi] = tlm_step_multistage(
                    stepper.kernel, stepper.tableau, blk, dblk, self.t0,
                    self.kappa, params, mdot_vec, stepper.newton,
                )
            else:
                out[:, lo:hi] = tlm_step_rl(
                    stepper.scheme, blk, dblk, self.t0, self.kappa, params, mdot_vec
                )
        return out

    def adjoint(self, ybar, want_params):
        stepper = self.solver.stepper
        params = self.solver.params
        out = np.empty_like(ybar)
        mbar = np.zeros(stepper.kernel.p) if want_params else None
        for lo, hi in self._chunks():
            blk = self.checkpoint[:, lo:hi]
            bblk = ybar[:, lo:hi]
            if isinstance(stepper, MultistageStepper):
                res, mb = adj_step_multistage(
                    stepper.kernel, stepper.tableau, blk, bblk, self.t0,
                    self.kappa, params, stepper.newton, want_params,
                )
            else:
                res, mb = adj_step_rl(
                    stepper.scheme, blk, bblk, self.t0, self.kappa, params, want_params
                )
            out[:, lo:hi] = res
            if want_params:
                mbar += mb
        if want_params:
            names = stepper.kernel.system.param_names
            return out, dict(zip(names, mbar))
        return out, {}


class PdeStepRecord:
    def __init__(self, op, component, t0, kappa, checkpoint, boundary_time=None):
        self.op = op
        self.component = int(component)
        self.t0 = float(t0)
        self.kappa = float(kappa)
        self.checkpoint = np.array(checkpoint, dtype=float)
        self.boundary_time = boundary_time
        self.exit_component = None  # filled by the driver (converged state)

    def replay(self, state):
        out = state.copy()
        out[self.component], _ = self.op.forward(state[self.component], self.kappa)
        return out

    def tlm(self, ydot, mdot_map):
        c = self.component
        out = ydot.copy()
        out[c] = self.op.tlm(
            ydot[c], self.checkpoint[c], self.exit_component, self.kappa, mdot_map
        )
        return out

    def adjoint(self, ybar, want_params):
        import time as _time

        c = self.component
        t0 = _time.perf_counter()
        vbar, partials = self.op.adjoint(
            ybar[c], self.checkpoint[c], self.exit_component, self.kappa,
            want_params,
        )
        self.last_op_seconds = _time.perf_counter() - t0
        out = ybar.copy()
        out[c] = vbar
        return out, partials


class Tape:
    """Ordered record of one forward solve plus control/functional registries."""

    def __init__(self):
        self.records = []
        self.initial = None
        self.final_state = None
        self.final_time = None
        self.controls = {}
        self.functionals = []

    # -- recording --------------------------------------------------------

    def record_initial(self, fld: StateField):
        self.initial = InitialRecord(fld.data, fld.time)

    def append(self, record):
        self.records.append(record)

    def finish(self, fld: StateField):
        self.final_state = fld.data.copy()
        self.final_time = fld.time
        for i, rec in enumerate(self.records):
            if isinstance(rec, PdeStepRecord):
                rec.exit_component = self.exit_state(i)[rec.component]
        return self

    def register_control(self, control: Control):
        self.controls[control.name] = control
        return control

    def register_functional(self, functional: Functional):
        if self.final_time is None:
            raise ValueError("finish the tape before registering functionals")
        for t in functional.sample_times(self.final_time):
            self.state_at(t)  # raises if t is not a step boundary
        self.functionals.append(functional)
        return functional

    # -- queries ----------------------------------------------------------

    def exit_state(self, i):
        for rec in self.records[i + 1 :]:
            return rec.checkpoint
        return self.final_state

    def boundary_records(self):
        out = []
        for i, rec in enumerate(self.records):
            if rec.boundary_time is not None:
                out.append((i, rec.boundary_time))
        return out

    def state_at(self, t):
        if self.initial is not None and abs(t - self.initial.time) <= _TIME_TOL * max(1.0, abs(t)):
            return self.initial.state
        for i, bt in self.boundary_records():
            if abs(t - bt) <= _TIME_TOL * max(1.0, abs(t)):
                return self.exit_state(i)
        raise ValueError(f"time {t} is not a recorded step boundary")

    def replay(self):
        """Re-run every record from its checkpoint; returns the final state."""
        state = self.initial.state.copy()
        for rec in self.records:
            state = rec.replay(rec.checkpoint)
        return state


# ---------------------------------------------------------------------------
# sweeps


def _inject(functional, times_wanted, t, state, ybar):
    if functional is None or t is None:
        return
    for ts in times_wanted:
        if abs(t - ts) <= _TIME_TOL * max(1.0, abs(ts)):
            ybar += functional.seed(state)


def adjoint_sweep(tape: Tape, functional: Functional = None, terminal=None,
                  want_params=True, timers: dict = None):
    """Walk the tape in reverse.  Seeds the co-state from the functional at
    every sampled boundary (or from ``terminal``), applies each record's
    adjoint and accumulates scalar-parameter partials.

    Returns (ybar_at_t0, partials dict).  ``timers`` accumulates wall time
    per record kind ("ode"/"pde"/"merge").
    """
    import time as _time

    shape = tape.final_state.shape
    ybar = np.zeros(shape)
    if terminal is not None:
        ybar += terminal
    times = functional.sample_times(tape.final_time) if functional else ()
    partials = {}
    _inject(functional, times, tape.final_time, tape.final_state, ybar)
    for i in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[i]
        t_start = _time.perf_counter()
        ybar, part = rec.adjoint(ybar, want_params)
        if timers is not None:
            elapsed = _time.perf_counter() - t_start
            if isinstance(rec, OdeStepRecord):
                timers["ode"] = timers.get("ode", 0.0) + elapsed
            else:
                op_t = getattr(rec, "last_op_seconds", elapsed)
                timers["pde"] = timers.get("pde", 0.0) + op_t
                timers["merge"] = timers.get("merge", 0.0) + elapsed - op_t
        for name, val in part.items():
            partials[name] = partials.get(name, 0.0) + val
        bt = tape.records[i - 1].boundary_time if i > 0 else None
        if bt is not None:
            _inject(functional, times, bt, rec.checkpoint, ybar)
    if tape.records:  # an empty tape already injected t0 as the final state
        _inject(functional, times, tape.initial.time, tape.initial.state, ybar)
    return ybar, partials


def tlm_sweep(tape: Tape, ydot0=None, mdot: dict = None, functional: Functional = None):
    """Walk the tape forward propagating a direction.  Returns (ydot_T, Jdot)
    where Jdot is the functional's directional derivative (0.0 without a
    functional)."""
    shape = tape.initial.state.shape
    ydot = np.zeros(shape) if ydot0 is None else np.array(ydot0, dtype=float)
    mdot = mdot or {}
    times = functional.sample_times(tape.final_time) if functional else ()
    jdot = 0.0

    def sample(t, state, ydot_now):
        nonlocal jdot
        if functional is None:
            return
        for ts in times:
            if abs(t - ts) <= _TIME_TOL * max(1.0, abs(ts)):
                jdot += float(np.sum(functional.seed(state) * ydot_now))

    sample(tape.initial.time, tape.initial.state, ydot)
    for i, rec in enumerate(tape.records):
        if isinstance(rec, OdeStepRecord):
            names = rec.solver.stepper.kernel.system.param_names
            vec = np.array([mdot.get(nm, 0.0) for nm in names])
            ydot = rec.tlm(ydot, vec if vec.any() else None)
        else:
            ydot = rec.tlm(ydot, mdot)
        if rec.boundary_time is not None:
            sample(rec.boundary_time, tape.exit_state(i), ydot)
    return ydot, jdot


def reverse_sweep(tape: Tape, functional: Functional, controls, riesz_weights=None):
    """Gradient of the functional with respect to each control.

    Initial-field gradients are raw dual vectors by default; pass
    ``riesz_weights`` (a lumped mass vector) to get the L2-Riesz
    representative instead.
    """
    if isinstance(controls, Control):
        controls = [controls]
    want_params = any(c.kind == "scalar-parameter" for c in controls)
    ybar0, partials = adjoint_sweep(tape, functional, want_params=want_params)
    grads = {}
    for c in controls:
        if c.kind == "initial-field":
            g = ybar0[c.component].copy()
            if riesz_weights is not None:
                g = g / riesz_weights
            grads[c.name] = g
        else:
            grads[c.name] = float(partials.get(c.name, 0.0))
    return grads


# ---------------------------------------------------------------------------
# Taylor remainder test


@dataclass
class TaylorReport:
    steps: list
    r0: list
    r0_orders: list
    r1: list
    r1_orders: list
    saturated: bool

    def rows(self):
        out = []
        for i, h in enumerate(self.steps):
            out.append(
                {
                    "step": h,
                    "R0": self.r0[i],
                    "order": self.r0_orders[i] if i > 0 else None,
                    "R1": self.r1[i],
                    "order2": self.r1_orders[i] if i > 0 else None,
                }
            )
        return out


def taylor_test(j_of, j0, grad_dot_dir, steps):
    """Remainder convergence test.

    j_of(h) evaluates the functional at the control perturbed by h times the
    direction; grad_dot_dir is <grad J, direction>.  R0(h) = |J(m+h d)-J(m)|
    converges at first order, R1(h) = |J(m+h d)-J(m)-h <grad J, d>| at second
    order iff the gradient is exact.  Orders are log ratios between
    consecutive rungs.
    """
    steps = [float(h) for h in steps]
    if len(steps) < 3:
        raise ValueError("need at least 3 step sizes")
    r0, r1 = [], []
    for h in steps:
        jh = j_of(h)
        r0.append(abs(jh - j0))
        r1.append(abs(jh - j0 - h * grad_dot_dir))
    sat = max(r1) <= 1e-13 * max(1.0, abs(j0))

    def orders(r):
        out = [None]
        for i in range(1, len(steps)):
            if r[i] == 0.0 or r[i - 1] == 0.0:
                out.append(float("nan"))
            else:
                out.append(math.log(r[i - 1] / r[i]) / math.log(steps[i - 1] / steps[i]))
        return out

    return TaylorReport(steps, r0, orders(r0), r1, orders(r1), sat)
