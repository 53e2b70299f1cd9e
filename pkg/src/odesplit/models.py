"""Built-in model systems and experiment constants.

The mitochondrial swelling model tracks a calcium-like concentration u and
three mitochondria population densities (unswollen N1, swelling N2, fully
swollen N3); transitions are driven by the case-split cosine ramps f and g.
Summing the three density equations, the transition terms cancel exactly,
so N1 + N2 + N3 is conserved along exact trajectories.

The FitzHugh-Nagumo variant here uses the standard cubic form
dv/dt = c1 v (v/v_amp - a)(1 - v/v_amp) - c2 s, ds/dt = b (v - c3 s) with
amplitude v_amp = 100 and threshold a*v_amp = 13, so the parabolic initial
activation v0(x) = 10 (x0/50)^2 + 10 crosses threshold in part of the
domain and launches a wave.  The resting state is (0, 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import Const, Cos, Exp, Mul, Neg, Param, Piecewise, RhsSystem, Sin, State
from .fem import StructuredTriMesh, lumped_mass_vector
from .pointcloud import StateField

__all__ = [
    "MITO_CONSTANTS",
    "mito_f",
    "mito_g",
    "mito_system",
    "mito_initial",
    "conservation_check",
    "FHN_CONSTANTS",
    "fhn_system",
    "fhn_initial_v",
    "cardiac_conductivities",
    "TestProblem",
    "analytic_problems",
    "synthetic_stiff_system",
]

# mitochondria transition constants
MITO_CONSTANTS = {
    "cminus": 20.0,
    "cplus": 200.0,
    "fstar": 1.0,
    "gstar": 0.1,
    "d2": 30.0,
}
# d1 = 2e-6 and q = 3 belong to the diffusion half-step, see MitoPdeStep.

_PI = math.pi


def mito_f(s):
    """Swelling-initiation rate: 0 below cminus, fstar above cplus, cosine
    ramp between."""
    c = MITO_CONSTANTS
    s = np.asarray(s, dtype=float)
    ramp = 0.5 * c["fstar"] * (1.0 - np.cos((s - c["cminus"]) / (c["cplus"] - c["cminus"]) * _PI))
    out = np.where(s < c["cminus"], 0.0, np.where(s > c["cplus"], c["fstar"], ramp))
    return float(out) if out.ndim == 0 else out


def mito_g(s):
    """Swelling-completion rate: gstar above cplus, cosine ramp below."""
    c = MITO_CONSTANTS
    s = np.asarray(s, dtype=float)
    ramp = 0.5 * c["gstar"] * (1.0 - np.cos(s / c["cplus"] * _PI))
    out = np.where(s > c["cplus"], c["gstar"], ramp)
    return float(out) if out.ndim == 0 else out


def mito_system() -> RhsSystem:
    """States (u, N1, N2, N3): du/dt = d2 g(u) N2, dN1/dt = -f(u) N1,
    dN2/dt = f(u) N1 - g(u) N2, dN3/dt = +g(u) N2."""
    u, n1, n2, n3 = State(0), State(1), State(2), State(3)
    cminus, cplus, fstar, gstar, d2 = (Param(i) for i in range(5))
    f_ramp = fstar * Const(0.5) * (Const(1.0) - Cos((u - cminus) / (cplus - cminus) * Const(_PI)))
    f_u = Piecewise(
        ((u < cminus, Const(0.0)), (u > cplus, fstar)),
        f_ramp,
    )
    g_ramp = gstar * Const(0.5) * (Const(1.0) - Cos(u / cplus * Const(_PI)))
    g_u = Piecewise(((u > cplus, gstar),), g_ramp)
    exprs = (
        d2 * g_u * n2,
        Neg(f_u * n1),
        f_u * n1 - g_u * n2,
        g_u * n2,
    )
    names = ("cminus", "cplus", "fstar", "gstar", "d2")
    return RhsSystem(
        "mitochondria",
        ("u", "N1", "N2", "N3"),
        exprs,
        names,
        tuple(MITO_CONSTANTS[n] for n in names),
    )


def mito_gaussian(x0, x1, alpha=3.0, beta=-1.0):
    """Bump M(x) = exp(-(X0^2 + X1^2)/2) / (2 pi) with Xk = (alpha-beta)xk
    + beta."""
    xx0 = (alpha - beta) * x0 + beta
    xx1 = (alpha - beta) * x1 + beta
    return np.exp(-0.5 * (xx0**2 + xx1**2)) / (2.0 * _PI)


def mito_initial(mesh: StructuredTriMesh, total=30.0) -> StateField:
    """Initial field: u0 the Gaussian bump normalized so its lumped-mass
    integral equals ``total`` exactly; N1 = 1, N2 = N3 = 0."""
    v = mesh.vertices
    m_nodal = mito_gaussian(v[:, 0], v[:, 1])
    weights = lumped_mass_vector(mesh)
    u0 = (total / float(weights @ m_nodal)) * m_nodal
    data = np.zeros((4, mesh.n_vertices))
    data[0] = u0
    data[1] = 1.0
    return StateField(data, 0.0)


def conservation_check(fld: StateField, total0=1.0) -> float:
    """Max pointwise drift of the conserved density sum N1 + N2 + N3."""
    if fld.m != 4:
        raise ValueError("expected the 4-component mitochondria state")
    s = fld.data[1] + fld.data[2] + fld.data[3]
    return float(np.abs(s - total0).max())


# ---------------------------------------------------------------------------
# cardiac model

FHN_CONSTANTS = {
    "a": 0.13,
    "v_amp": 100.0,
    "c1": 0.26,
    "c2": 0.1,
    "b": 0.013,
    "c3": 1.0,
}

# chi (mm^-1), C_m (uF/mm^2) and the 2D conductivity scalars; the monodomain
# tensor uses the harmonic mean of the intra- and extracellular values per
# direction, diag(g_f, g_s).
CHI = 140.0
C_M = 0.01


def cardiac_conductivities():
    scale = CHI * C_M
    g_ef = 0.625 / scale
    g_es = 0.236 / scale
    g_if = 0.174 / scale
    g_f = g_if * g_ef / (g_if + g_ef)
    g_s = g_if * g_es / (g_if + g_es)
    return {"g_ef": g_ef, "g_es": g_es, "g_if": g_if, "g_f": g_f, "g_s": g_s}


def fhn_system() -> RhsSystem:
    """Two-state cubic cell model; the unused ``dummy`` parameter is a
    deliberately inert control for gradient sanity checks."""
    v, s = State(0), State(1)
    a, v_amp, c1, c2, b, c3 = (Param(i) for i in range(6))
    dv = c1 * v * (v / v_amp - a) * (Const(1.0) - v / v_amp) - c2 * s
    ds = b * (v - c3 * s)
    names = ("a", "v_amp", "c1", "c2", "b", "c3", "dummy")
    defaults = tuple(FHN_CONSTANTS[n] for n in names[:-1]) + (0.0,)
    return RhsSystem("fitzhugh-nagumo", ("v", "s"), (dv, ds), names, defaults)


def fhn_initial_v(mesh: StructuredTriMesh) -> np.ndarray:
    """Parabolic activation v0 = 10 (x0/50)^2 + 10 over the 50 mm domain."""
    x0 = mesh.vertices[:, 0]
    return 10.0 * (x0 / 50.0) ** 2 + 10.0


# ---------------------------------------------------------------------------
# analytic test problems


@dataclass(frozen=True)
class TestProblem:
    """System with a closed-form solution, for convergence harnesses.

    Construction verifies that the exact solution satisfies the right-hand
    side to 1e-12 at sampled times.
    """

    __test__ = False  # not a pytest collectible

    name: str
    system: RhsSystem
    y0: np.ndarray
    horizon: float
    exact: object  # t -> (m,)
    exact_dt: object  # t -> (m,)

    def __post_init__(self):
        object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float))
        for t in np.linspace(0.0, self.horizon, 7):
            y = np.asarray(self.exact(t), dtype=float)
            lhs = np.asarray(self.exact_dt(t), dtype=float)
            rhs = self.system.f(y, t)
            err = np.abs(lhs - rhs).max()
            if err > 1e-12 * max(1.0, np.abs(rhs).max()):
                raise ValueError(
                    f"test problem {self.name}: exact solution violates the "
                    f"RHS by {err:.2e} at t = {t}"
                )


def analytic_problems():
    y = State(0)
    quad = TestProblem(
        "decay-quadratic",
        RhsSystem("quadratic-decay", ("y",), (Neg(Mul(y, y)),)),
        [1.0],
        1.0,
        lambda t: np.array([1.0 / (1.0 + t)]),
        lambda t: np.array([-1.0 / (1.0 + t) ** 2]),
    )
    cubic = TestProblem(
        "decay-cubic",
        RhsSystem("cubic-decay", ("y",), (Neg(Mul(Mul(y, y), y)),)),
        [1.0],
        1.0,
        lambda t: np.array([(1.0 + 2.0 * t) ** -0.5]),
        lambda t: np.array([-((1.0 + 2.0 * t) ** -1.5)]),
    )
    lam = -1.0
    linear = TestProblem(
        "linear-decay",
        RhsSystem("linear-decay", ("y",), (Mul(Const(lam), y),)),
        [1.0],
        1.0,
        lambda t: np.array([math.exp(lam * t)]),
        lambda t: np.array([lam * math.exp(lam * t)]),
    )
    return {p.name: p for p in (quad, cubic, linear)}


def synthetic_stiff_system(n=38, lam_min=1.0, lam_max=1e3) -> RhsSystem:
    """Synthetic stiff n-component stand-in for a large ionic model:
    dy_i/dt = -lam_i y_i + 0.5 sin(y_{i+1 mod n}) + 0.1 exp(-y_i^2), with
    log-spaced rates.  One transcendental per term keeps the per-point
    arithmetic density comparable to real cell models."""
    lam = np.logspace(math.log10(lam_min), math.log10(lam_max), n)
    exprs = []
    for i in range(n):
        yi = State(i)
        ynext = State((i + 1) % n)
        exprs.append(
            Mul(Const(-lam[i]), yi)
            + Const(0.5) * Sin(ynext)
            + Const(0.1) * Exp(Neg(Mul(yi, yi)))
        )
    return RhsSystem(
        f"synthetic-stiff-{n}",
        tuple(f"y{i}" for i in range(n)),
        tuple(exprs),
    )
