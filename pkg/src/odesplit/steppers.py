"""Uniform stepper objects over multistage and Rush-Larsen schemes.

A stepper advances a whole batch of per-point states one step and exposes
the pieces the sensitivity machinery needs (kernel, scheme data, workspace
factory).  Scheme names accepted by :func:`make_stepper` are the builtin
tableau names plus ``rl1``, ``grl1``, ``rl2``, ``grl2``.
"""

from __future__ import annotations

from . import multistage
from .multistage import NewtonParams, StageWorkspace, StepStats
from .rushlarsen import RL_VARIANTS, RlScheme, RlWorkspace, make_rl_scheme, rl_step_batch
from .tableau import BUILTIN_NAMES, ButcherTableau, builtin

__all__ = ["MultistageStepper", "RushLarsenStepper", "make_stepper", "SCHEME_NAMES"]

SCHEME_NAMES = BUILTIN_NAMES + RL_VARIANTS


class MultistageStepper:
    def __init__(self, kernel, tab: ButcherTableau, newton: NewtonParams = None):
        self.kernel = kernel
        self.tableau = tab
        self.newton = newton or NewtonParams()

    @property
    def name(self):
        return self.tableau.name

    @property
    def state_dim(self):
        return self.kernel.m

    @property
    def order(self):
        return self.tableau.order

    def make_workspace(self, n):
        return StageWorkspace(self.kernel, self.tableau, n)

    def step_batch(self, y, t, kappa, params=None, workspace=None, capture=None):
        return multistage.step_batch(
            self.kernel, self.tableau, y, t, kappa, params,
            newton=self.newton, workspace=workspace, capture=capture,
        )

    def reset_workspace(self, workspace):
        """Invalidate cached Jacobians so a step depends on its entry state
        only (required for bitwise tape replay)."""
        if workspace is not None:
            workspace.invalidate()


class RushLarsenStepper:
    def __init__(self, scheme: RlScheme):
        self.scheme = scheme
        self.kernel = scheme.kernel

    @property
    def name(self):
        return self.scheme.variant

    @property
    def state_dim(self):
        return self.kernel.m

    @property
    def order(self):
        return self.scheme.order

    def make_workspace(self, n):
        return RlWorkspace(self.kernel, n)

    def step_batch(self, y, t, kappa, params=None, workspace=None, capture=None):
        y1 = rl_step_batch(self.scheme, y, t, kappa, params, workspace=workspace)
        if capture is not None:
            capture.clear()
        return y1, StepStats()

    def reset_workspace(self, workspace):
        pass


def make_stepper(name, kernel, newton: NewtonParams = None):
    if name in RL_VARIANTS:
        return RushLarsenStepper(make_rl_scheme(name, kernel))
    return MultistageStepper(kernel, builtin(name), newton)
