"""Forward time stepping by Butcher tableaux with a dense Newton inner solver.

Implicit stages solve g(k_i) = k_i - f(y0 + kappa*sum_j a_ij k_j, t0 + c_i
kappa) = 0 by Newton with batched dense LU; explicit stages are a single
right-hand side evaluation.  The Jacobian-reuse policy controls how often
df/dy is re-evaluated: every iteration, once per step, or kept across steps
until a point's residual-reduction ratio degrades past ``slow_ratio``.
Refresh decisions are made per point, so a point's trajectory does not
depend on which batch it is solved in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import lu_factor, lu_solve
from .tableau import ButcherTableau

__all__ = [
    "DENSE_CAP",
    "NewtonParams",
    "NewtonNonconvergenceError",
    "StageStats",
    "StepStats",
    "StageWorkspace",
    "newton_solve",
    "stage_update",
    "step",
    "step_batch",
]

DENSE_CAP = 64  # states per point; inner systems stay small and dense

_POLICIES = ("always-refresh", "reuse-within-step", "reuse-across-steps-until-slow")


@dataclass(frozen=True)
class NewtonParams:
    tol: float = 1e-10
    max_iter: int = 30
    jacobian_reuse: str = "always-refresh"
    slow_ratio: float = 0.5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.jacobian_reuse not in _POLICIES:
            raise ValueError(f"unknown reuse policy {self.jacobian_reuse!r}")


class NewtonNonconvergenceError(RuntimeError):
    def __init__(self, residual, iterations, stage=None, point=None):
        self.residual = residual
        self.iterations = iterations
        self.stage = stage
        self.point = point
        loc = "" if stage is None else f" at stage {stage + 1}"
        pt = "" if point is None else f" (point {point})"
        super().__init__(
            f"Newton did not converge{loc}{pt}: residual {residual:.3e} "
            f"after {iterations} iterations"
        )


@dataclass
class StageStats:
    implicit: bool = False
    iterations: int = 0
    jacobian_refreshes: int = 0
    lu_factorizations: int = 0
    f_evals: int = 0


@dataclass
class StepStats:
    per_stage: list = field(default_factory=list)

    @property
    def newton_iterations(self):
        return sum(s.iterations for s in self.per_stage)

    @property
    def jacobian_refreshes(self):
        return sum(s.jacobian_refreshes for s in self.per_stage)

    @property
    def lu_factorizations(self):
        return sum(s.lu_factorizations for s in self.per_stage)

    @property
    def f_evals(self):
        return sum(s.f_evals for s in self.per_stage)

    def merge(self, other):
        self.per_stage.extend(other.per_stage)


class StageWorkspace:
    """Mutable per-thread buffers for one (tableau, kernel, batch) shape.

    Holds stage values, the per-point Jacobian cache with its validity and
    refresh marks, and kernel scratch registers.
    """

    def __init__(self, kernel, tab: ButcherTableau, n: int):
        m = kernel.m
        self.n = n
        self.m = m
        self.K = np.empty((tab.s, m, n))
        self.jac = np.empty((n, m, m))
        self.jac_valid = np.zeros(n, dtype=bool)
        self.refresh_mark = np.zeros(n, dtype=bool)
        self.evaluated_this_step = np.zeros(n, dtype=bool)
        self.scratch = kernel.make_scratch(n)

    def begin_step(self):
        self.evaluated_this_step[:] = False

    def invalidate(self):
        self.jac_valid[:] = False
        self.refresh_mark[:] = False


def _as_batch(y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return y[:, None], True
    return y, False


def stage_update(y0, kappa, b, K):
    """y1 = y0 + kappa * sum_i b_i k_i, accumulated in ascending stage order."""
    acc = np.zeros_like(y0)
    for i in range(len(b)):
        acc += (kappa * b[i]) * K[i]
    return y0 + acc


def _eval_f(kernel, y, t, params, out=None):
    return kernel.f(y, t, params, out=out)


def _refresh_jacobian(kernel, ws, y_stage, t_i, params, points, stats):
    sub = kernel.full_jac(y_stage[:, points], t_i, params)  # (m, m, nn)
    ws.jac[points] = np.moveaxis(sub, 2, 0)
    ws.jac_valid[points] = True
    ws.refresh_mark[points] = False
    ws.evaluated_this_step[points] = True
    stats.jacobian_refreshes += 1


def _solve_implicit_stage(
    kernel, ws, w_explicit, a_ii, t_i, kappa, params, guess, newton, stats, stage
):
    m, n = w_explicit.shape
    k = guess.copy()
    y_stage = w_explicit + (kappa * a_ii) * k
    r = k - _eval_f(kernel, y_stage, t_i, params)
    stats.f_evals += 1
    rnorm = np.abs(r).max(axis=0)
    active = rnorm > newton.tol
    policy = newton.jacobian_reuse
    iterations = 0
    diag = np.arange(m)
    while active.any():
        if iterations >= newton.max_iter:
            worst = int(np.argmax(rnorm * active))
            raise NewtonNonconvergenceError(
                float(rnorm[worst]), iterations, stage=stage,
                point=worst if n > 1 else None,
            )
        if policy == "always-refresh":
            need = active.copy()
        elif policy == "reuse-within-step":
            need = active & ~ws.evaluated_this_step
        else:
            need = active & (~ws.jac_valid | ws.refresh_mark)
        if need.any():
            _refresh_jacobian(kernel, ws, y_stage, t_i, params, np.flatnonzero(need), stats)
        idx = np.flatnonzero(active)
        a_sys = (-kappa * a_ii) * ws.jac[idx]
        a_sys[:, diag, diag] += 1.0
        lu, piv = lu_factor(a_sys)
        stats.lu_factorizations += 1
        delta = lu_solve(lu, piv, r[:, idx].T)
        k[:, idx] -= delta.T
        y_stage[:, idx] = w_explicit[:, idx] + (kappa * a_ii) * k[:, idx]
        r[:, idx] = k[:, idx] - _eval_f(kernel, y_stage[:, idx], t_i, params)
        stats.f_evals += 1
        rnew = np.abs(r[:, idx]).max(axis=0)
        still = rnew > newton.tol
        if policy == "reuse-across-steps-until-slow":
            slow = still & (rnew > newton.slow_ratio * rnorm[idx])
            ws.refresh_mark[idx[slow]] = True
        rnorm[idx] = rnew
        active[idx] = still
        iterations += 1
    stats.iterations += iterations
    return k, y_stage


def step_batch(kernel, tab: ButcherTableau, y0, t0, kappa, params=None,
               newton: NewtonParams = None, workspace: StageWorkspace = None,
               capture: dict = None):
    """Advance every column of y0 (shape (m, n)) one step of size kappa.

    Returns (y1, StepStats).  Raises NewtonNonconvergenceError with the
    failing stage and point index when an implicit stage does not converge.
    When ``capture`` is a dict it receives copies of the stage values "k"
    (s, m, n) and the converged stage states "w" (s, m, n).
    """
    if kappa <= 0:
        raise ValueError("timestep must be positive")
    y0b, single = _as_batch(y0)
    m, n = y0b.shape
    if m != kernel.m:
        raise ValueError(f"state dimension {m} != kernel dimension {kernel.m}")
    if m > DENSE_CAP:
        raise ValueError(f"dense stage solver capped at m <= {DENSE_CAP}, got {m}")
    newton = newton or NewtonParams()
    ws = workspace if workspace is not None and workspace.n == n else StageWorkspace(kernel, tab, n)
    ws.begin_step()
    stats = StepStats()
    K = ws.K
    stage_states = np.empty((tab.s, m, n)) if capture is not None else None
    f0 = None
    for i in range(tab.s):
        st = StageStats(implicit=bool(tab.a[i, i] != 0.0))
        stats.per_stage.append(st)
        w = y0b.copy()
        for j in range(i):
            if tab.a[i, j] != 0.0:
                w += (kappa * tab.a[i, j]) * K[j]
        t_i = t0 + tab.c[i] * kappa
        if tab.a[i, i] == 0.0:
            K[i] = _eval_f(kernel, w, t_i, params)
            st.f_evals += 1
            y_stage = w
        else:
            if i > 0:
                guess = K[i - 1]
            else:
                if f0 is None:
                    f0 = _eval_f(kernel, y0b, t0, params)
                    st.f_evals += 1
                guess = f0
            K[i], y_stage = _solve_implicit_stage(
                kernel, ws, w, tab.a[i, i], t_i, kappa, params, guess, newton, st, i
            )
        if stage_states is not None:
            stage_states[i] = y_stage
    y1 = stage_update(y0b, kappa, tab.b, K)
    if capture is not None:
        capture["k"] = K[: tab.s].copy()
        capture["w"] = stage_states
    return (y1[:, 0], stats) if single else (y1, stats)


def step(kernel, tab: ButcherTableau, y0, t0, kappa, params=None,
         newton: NewtonParams = None, workspace: StageWorkspace = None):
    """Single-point step: y0 has shape (m,)."""
    return step_batch(kernel, tab, y0, t0, kappa, params, newton, workspace)


def newton_solve(residual, jacobian, guess, params: NewtonParams = None):
    """Generic dense Newton for one system: residual/jacobian are callables
    of the iterate.  Returns (solution, iterations)."""
    params = params or NewtonParams()
    x = np.atleast_1d(np.asarray(guess, dtype=float)).copy()
    if x.size > DENSE_CAP:
        raise ValueError(f"dense Newton capped at {DENSE_CAP} unknowns")
    for it in range(params.max_iter + 1):
        r = np.atleast_1d(np.asarray(residual(x), dtype=float))
        if np.abs(r).max() <= params.tol:
            return x, it
        if it == params.max_iter:
            break
        j = np.atleast_2d(np.asarray(jacobian(x), dtype=float))
        lu, piv = lu_factor(j)
        x -= lu_solve(lu, piv, r)
    raise NewtonNonconvergenceError(float(np.abs(r).max()), params.max_iter)
