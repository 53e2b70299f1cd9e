"""Rush-Larsen exponential integrators (first and second order, original and
generalized variants).

Per component, the exponential update reads y_i + kappa*f_i*phi(kappa*J_i)
with J_i the i'th diagonal Jacobian entry, which coincides with
J_i^{-1} f_i (e^{kappa J_i} - 1) for J_i != 0 and is analytic at J_i = 0, so
no non-vanishing assumption on J_i is needed.  The original variants (RL1,
RL2) take the exponential branch only for components whose right-hand side
is linear in their own state and fall back to forward Euler otherwise; the
generalized variants (GRL1, GRL2) use the exponential branch everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["phi", "phi_prime", "RlScheme", "RlWorkspace", "make_rl_scheme", "rl_step_batch", "RL_VARIANTS"]

RL_VARIANTS = ("rl1", "grl1", "rl2", "grl2")

_PHI_SMALL = 1e-5
_PHIP_SMALL = 1e-2


def phi(z):
    """(e^z - 1)/z, evaluated stably: expm1-based for |z| >= 1e-5 and a
    4-term Taylor series below.  Total on floats; overflows to +inf for
    z beyond ~709."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _PHI_SMALL
    den = np.where(small, 1.0, z)
    series = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0)))
    with np.errstate(over="ignore", invalid="ignore"):
        ramp = np.expm1(z) / den
    out = np.where(small, series, ramp)
    return float(out) if out.ndim == 0 else out


def phi_prime(z):
    """Derivative of phi: (e^z (z - 1) + 1)/z^2 with a series branch that
    avoids the cancellation near zero."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _PHIP_SMALL
    den = np.where(small, 1.0, z)
    series = 0.5 + z * (
        1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0)))
    )
    with np.errstate(over="ignore", invalid="ignore"):
        exact = (np.expm1(z) * (z - 1.0) + z) / (den * den)
    out = np.where(small, series, exact)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RlScheme:
    """A Rush-Larsen variant bound to a compiled kernel.

    linear_flags marks components whose f_i is linear in y_i (syntactic
    check, conservative toward nonlinear); only rl1/rl2 consult it.
    """

    variant: str
    kernel: object
    linear_flags: np.ndarray

    def __post_init__(self):
        if self.variant not in RL_VARIANTS:
            raise ValueError(f"unknown Rush-Larsen variant {self.variant!r}")
        flags = np.asarray(self.linear_flags, dtype=bool)
        if flags.shape != (self.kernel.m,):
            raise ValueError("linearity flags must have one entry per state")
        flags.setflags(write=False)
        object.__setattr__(self, "linear_flags", flags)

    @property
    def order(self):
        return 1 if self.variant in ("rl1", "grl1") else 2


def make_rl_scheme(variant: str, kernel) -> RlScheme:
    """Build an RlScheme; linearity flags come from the kernel's system."""
    return RlScheme(variant, kernel, kernel.system.linear_flags())


class RlWorkspace:
    """Preallocated evaluation buffers for one batch width (one per chunk)."""

    def __init__(self, kernel, n):
        self.n = n
        m = kernel.m
        self.scratch = kernel.make_scratch(n)
        self.f = np.empty((m, n))
        self.jd = np.empty((m, n))
        self.fh = np.empty((m, n))
        self.jdh = np.empty((m, n))


def _exp_update(y, f, jd, kappa):
    return y + (kappa * f) * phi(kappa * jd)


def _branch_update(y, f, jd, kappa, flags):
    expo = (kappa * f) * phi(kappa * jd)
    return y + np.where(flags, expo, kappa * f)


def _exp_full_update(y0, yh, fh, jdh, kappa):
    # Exact integration over [0, kappa] of f linearized about the half-step
    # state: dy_i/dt = f_i(yh) + J_i(yh) (y_i - yh_i), started at y0.  Using
    # f(yh) directly in the one-sided ramp would double-count the
    # second-order term and drop the scheme to first order.
    ftilde = fh + jdh * (y0 - yh)
    return y0 + (kappa * ftilde) * phi(kappa * jdh)


def _branch_full_update(y0, yh, fh, jdh, kappa, flags):
    return np.where(
        flags, _exp_full_update(y0, yh, fh, jdh, kappa), y0 + kappa * fh
    )


def rl_step_batch(scheme: RlScheme, y0, t0, kappa, params=None, workspace=None):
    """One Rush-Larsen step of the whole batch; y0 is (m,) or (m, n).

    kappa = 0 returns y0 unchanged (identity step).  An RlWorkspace of the
    right width routes evaluations through preallocated buffers.
    """
    kernel = scheme.kernel
    y = np.asarray(y0, dtype=float)
    single = y.ndim == 1
    yb = y[:, None] if single else y
    if kappa == 0.0:
        out = yb.copy()
        return out[:, 0] if single else out
    ws = workspace if isinstance(workspace, RlWorkspace) and workspace.n == yb.shape[1] else None
    if ws is not None and params is None:
        params = kernel.system.default_params()

    def evaluate_at(ybuf, t, fbuf, jdbuf):
        if ws is None:
            return kernel.f(ybuf, t, params), kernel.diag_jac(ybuf, t, params)
        kernel._eval_chunk("f", ybuf, t, params, fbuf, ws.scratch)
        kernel._eval_chunk("diag", ybuf, t, params, jdbuf, ws.scratch)
        return fbuf, jdbuf

    flags = scheme.linear_flags[:, None]
    variant = scheme.variant
    fb = ws.f if ws is not None else None
    jb = ws.jd if ws is not None else None
    if variant in ("rl1", "grl1"):
        f, jd = evaluate_at(yb, t0, fb, jb)
        y1 = _exp_update(yb, f, jd, kappa) if variant == "grl1" \
            else _branch_update(yb, f, jd, kappa, flags)
    else:
        half = 0.5 * kappa
        f0, jd0 = evaluate_at(yb, t0, fb, jb)
        if variant == "grl2":
            yh = _exp_update(yb, f0, jd0, half)
        else:
            yh = _branch_update(yb, f0, jd0, half, flags)
        th = t0 + half
        fh, jdh = evaluate_at(
            yh, th,
            ws.fh if ws is not None else None,
            ws.jdh if ws is not None else None,
        )
        if variant == "grl2":
            y1 = _exp_full_update(yb, yh, fh, jdh, kappa)
        else:
            y1 = _branch_full_update(yb, yh, fh, jdh, kappa, flags)
    return y1[:, 0] if single else y1
