"""Diffusion half-steps and the theta-splitting driver coupling them to
point ODE collections.

Each outer step of size kappa runs: (1) the ODE collection over
[t, t + theta*kappa]; (2) the PDE step over [t, t + kappa] starting from
the ODE output's shared component; (3) for theta < 1, the ODE collection
over [t + theta*kappa, t + kappa] with the PDE output as the shared
component and the first ODE output for the rest.  theta = 1/2 gives the
second-order Strang scheme, other values are first order.

Both PDE operators expose forward/tlm/adjoint with the adjoint defined as
the exact transpose linearization of the discrete residual at the converged
state, so gradients are exact for the discretized problem.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    StructuredTriMesh,
    assemble_mass,
    assemble_stiffness,
    cg_solve,
    lumped_mass_vector,
)
from .multistage import NewtonNonconvergenceError
from .pointcloud import StateField
from .sensitivity import OdeStepRecord, PdeStepRecord, Tape

__all__ = ["SplitConfig", "MonodomainStep", "MitoPdeStep", "pde_step_mito", "pde_step_monodomain", "split_step", "run_split", "run_ode_only", "PdeStats"]


@dataclass(frozen=True)
class SplitConfig:
    theta: float = 0.5
    kappa: float = 0.1
    pde_rtol: float = 1e-10
    newton_tol: float = 1e-10
    max_newton: int = 30

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


@dataclass
class PdeStats:
    cg_iterations: int = 0
    newton_iterations: int = 0


class MonodomainStep:
    """Crank-Nicolson step of v_t = div(M grad v) with M = diag(g_f, g_s):
    (Mass + kappa/2 K) v1 = (Mass - kappa/2 K) v0, lumped mass, solved by
    Jacobi-preconditioned CG.  ``g_f`` and ``g_s`` are differentiable
    parameters."""

    param_names = ("g_f", "g_s")

    def __init__(self, mesh: StructuredTriMesh, g_f, g_s, rtol=1e-10):
        self.mesh = mesh
        self.g_f = float(g_f)
        self.g_s = float(g_s)
        self.rtol = float(rtol)
        self.mass = lumped_mass_vector(mesh)
        self.kx = assemble_stiffness(mesh, np.diag([1.0, 0.0]), definite=False).mat
        self.ky = assemble_stiffness(mesh, np.diag([0.0, 1.0]), definite=False).mat
        self._cache = {}
        self.stats = PdeStats()

    def stiffness(self):
        return self.g_f * self.kx + self.g_s * self.ky

    def _operators(self, kappa):
        key = (kappa, self.g_f, self.g_s)
        ops = self._cache.get(key)
        if ops is None:
            k = self.stiffness()
            mass = sp.diags(self.mass)
            a = (mass + 0.5 * kappa * k).tocsr()
            b = (mass - 0.5 * kappa * k).tocsr()
            ops = (a, b)
            self._cache = {key: ops}
        return ops

    def forward(self, v0, kappa):
        a, b = self._operators(kappa)
        v1, iters = cg_solve(a, b @ v0, rtol=self.rtol, x0=v0)
        self.stats.cg_iterations += iters
        return v1, PdeStats(cg_iterations=iters)

    def _sens_rtol(self):
        # sensitivity solves run tighter than the forward so the adjoint is
        # a transpose to well below the duality budget despite iterative
        # inner solves
        return max(self.rtol * 1e-2, 1e-14)

    def tlm(self, vdot0, v0, v1, kappa, mdot: dict = None):
        a, b = self._operators(kappa)
        rhs = b @ vdot0
        if mdot:
            gdot_f = mdot.get("g_f", 0.0)
            gdot_s = mdot.get("g_s", 0.0)
            if gdot_f:
                rhs -= (0.5 * kappa * gdot_f) * (self.kx @ (v1 + v0))
            if gdot_s:
                rhs -= (0.5 * kappa * gdot_s) * (self.ky @ (v1 + v0))
        vdot1, iters = cg_solve(a, rhs, rtol=self._sens_rtol())
        self.stats.cg_iterations += iters
        return vdot1

    def adjoint(self, vbar1, v0, v1, kappa, want_params=False):
        a, b = self._operators(kappa)
        lam, iters = cg_solve(a, vbar1, rtol=self._sens_rtol())
        self.stats.cg_iterations += iters
        vbar0 = b @ lam
        partials = {}
        if want_params:
            w = v1 + v0
            partials["g_f"] = -0.5 * kappa * float((self.kx @ w) @ lam)
            partials["g_s"] = -0.5 * kappa * float((self.ky @ w) @ lam)
        return vbar0, partials


class MitoPdeStep:
    """One implicit step of u_t = d1 * div grad A(u), A(u) = |u|^(q-2) u,
    in the midpoint form: Mass (u1 - u0) + kappa d1 K A((u1 + u0)/2) = 0
    with nodal interpolation of A (group finite elements).

    Newton's method with the exact residual Jacobian Mass + kappa d1 / 2 *
    K diag(A'(mid)); the A'' coupling makes that Jacobian slightly
    nonsymmetric, so the inner solves use a sparse direct factorization
    (the adjoint reuses its transpose).
    """

    param_names = ()

    def __init__(self, mesh: StructuredTriMesh, q=3, d1=2e-6,
                 newton_tol=1e-10, max_newton=30):
        if q < 2 or int(q) != q:
            raise ValueError("q must be an integer >= 2")
        self.mesh = mesh
        self.q = int(q)
        self.d1 = float(d1)
        self.newton_tol = float(newton_tol)
        self.max_newton = int(max_newton)
        self.massop = assemble_mass(mesh, lumped=False).mat
        self.k = assemble_stiffness(mesh).mat
        self.stats = PdeStats()

    def a_of(self, u):
        if self.q == 2:
            return u
        return np.abs(u) ** (self.q - 2) * u

    def a_prime(self, u):
        if self.q == 2:
            return np.ones_like(u)
        return (self.q - 1) * np.abs(u) ** (self.q - 2)

    def residual(self, u1, u0, kappa):
        mid = 0.5 * (u1 + u0)
        return self.massop @ (u1 - u0) + (kappa * self.d1) * (self.k @ self.a_of(mid))

    def _jacobian(self, mid, kappa):
        d = self.a_prime(mid)
        kd = self.k.multiply(d[None, :]).tocsc()
        return (self.massop + (0.5 * kappa * self.d1) * kd).tocsc()

    def forward(self, u0, kappa):
        u1 = u0.copy()
        iters = 0
        while True:
            r = self.residual(u1, u0, kappa)
            if np.abs(r).max() <= self.newton_tol:
                break
            if iters >= self.max_newton:
                raise NewtonNonconvergenceError(float(np.abs(r).max()), iters)
            j = self._jacobian(0.5 * (u1 + u0), kappa)
            u1 -= spla.splu(j).solve(r)
            iters += 1
        self.stats.newton_iterations += iters
        return u1, PdeStats(newton_iterations=iters)

    def tlm(self, udot0, u0, u1, kappa, mdot: dict = None):
        mid = 0.5 * (u1 + u0)
        d = self.a_prime(mid)
        j = self._jacobian(mid, kappa)
        rhs = self.massop @ udot0 - (0.5 * kappa * self.d1) * (self.k @ (d * udot0))
        return spla.splu(j).solve(rhs)

    def adjoint(self, ubar1, u0, u1, kappa, want_params=False):
        mid = 0.5 * (u1 + u0)
        d = self.a_prime(mid)
        j = self._jacobian(mid, kappa)
        lam = spla.splu(j).solve(ubar1, trans="T")
        ubar0 = self.massop @ lam - (0.5 * kappa * self.d1) * (d * (self.k @ lam))
        return ubar0, {}


def pde_step_mito(u_star, mesh, kappa, q=3, d1=2e-6, newton_tol=1e-10):
    """One nonlinear diffusion step of the calcium concentration field."""
    op = MitoPdeStep(mesh, q=q, d1=d1, newton_tol=newton_tol)
    return op.forward(np.asarray(u_star, dtype=float), kappa)


def pde_step_monodomain(v_star, mesh, g_f, g_s, kappa, rtol=1e-10):
    """One Crank-Nicolson diffusion step of the transmembrane potential."""
    op = MonodomainStep(mesh, g_f, g_s, rtol=rtol)
    return op.forward(np.asarray(v_star, dtype=float), kappa)


def split_step(fld: StateField, t, kappa, theta, ode_solver, pde_op,
               pde_component=0, tape: Tape = None, timers: dict = None):
    """One theta-split step over [t, t + kappa]; returns (field', stats)."""
    record = tape is not None
    stats = PdeStats()
    state = fld

    def tick():
        return _time.perf_counter()

    if theta > 0.0:
        if record:
            tape.append(OdeStepRecord(ode_solver, t, theta * kappa, state.data, None))
        t0 = tick()
        state, _ = ode_solver.step_all(state, t, theta * kappa, fresh_jacobians=record)
        if timers is not None:
            timers["ode"] = timers.get("ode", 0.0) + tick() - t0
    if record:
        bt = t + kappa if theta >= 1.0 else None
        tape.append(PdeStepRecord(pde_op, pde_component, t, kappa, state.data, bt))
    t0 = tick()
    vdag, pst = pde_op.forward(state.component(pde_component), kappa)
    if timers is not None:
        timers["pde"] = timers.get("pde", 0.0) + tick() - t0
    stats.cg_iterations += pst.cg_iterations
    stats.newton_iterations += pst.newton_iterations
    t0 = tick()
    state = state.with_component(pde_component, vdag,
                                 time=t + kappa if theta >= 1.0 else None)
    if timers is not None:
        timers["merge"] = timers.get("merge", 0.0) + tick() - t0
    if theta < 1.0:
        if record:
            tape.append(
                OdeStepRecord(ode_solver, t + theta * kappa, (1.0 - theta) * kappa,
                              state.data, t + kappa)
            )
        t0 = tick()
        state, _ = ode_solver.step_all(
            state, t + theta * kappa, (1.0 - theta) * kappa, fresh_jacobians=record
        )
        if timers is not None:
            timers["ode"] = timers.get("ode", 0.0) + tick() - t0
    return state, stats


def run_split(fld: StateField, t0, n_steps, kappa, theta, ode_solver, pde_op,
              pde_component=0, tape: Tape = None, timers: dict = None):
    """March n_steps theta-split steps; records on the tape when given."""
    if tape is not None:
        tape.record_initial(fld)
    state = fld
    t = t0
    total = PdeStats()
    for _ in range(n_steps):
        state, st = split_step(
            state, t, kappa, theta, ode_solver, pde_op, pde_component, tape, timers
        )
        total.cg_iterations += st.cg_iterations
        total.newton_iterations += st.newton_iterations
        t += kappa
    if tape is not None:
        tape.finish(state)
    return state, total


def run_ode_only(fld: StateField, t0, n_steps, kappa, ode_solver,
                 tape: Tape = None):
    """Pure ODE-collection march (no PDE), recording each step."""
    if tape is not None:
        tape.record_initial(fld)
    state = fld
    t = t0
    for _ in range(n_steps):
        if tape is not None:
            tape.append(OdeStepRecord(ode_solver, t, kappa, state.data, t + kappa))
        state, _ = ode_solver.step_all(state, t, kappa, fresh_jacobians=tape is not None)
        t += kappa
    if tape is not None:
        tape.finish(state)
    return state
