"""Symbolic expression graphs for pointwise ODE right-hand sides.

Expressions are immutable node trees (structurally a DAG: shared subtrees are
allowed and never mutated) built from constants, the time symbol, state and
parameter symbols, arithmetic, a small set of transcendental functions, and
total piecewise definitions guarded by comparison predicates.  They support
exact symbolic differentiation, conservative linearity analysis and
value-preserving simplification.  Spatial coupling is deliberately
inexpressible: every node is pointwise in the state.

Values are evaluated in float64, scalar or elementwise over numpy arrays.
The tree interpreter in this module is the semantic reference; the register
kernels produced by :mod:`odesplit.kernel` must match it bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Time",
    "State",
    "Param",
    "Neg",
    "Add",
    "Mul",
    "Div",
    "Pow",
    "Exp",
    "Log",
    "Sin",
    "Cos",
    "Abs",
    "Compare",
    "Piecewise",
    "piecewise",
    "RhsSystem",
    "SystemValidationError",
    "differentiate",
    "simplify",
    "is_linear_in",
    "evaluate",
    "contains_symbol",
    "free_states",
    "free_params",
]


def _wrap(value):
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Const(float(value))
    raise TypeError(f"cannot use {type(value).__name__} as an expression")


@dataclass(frozen=True)
class Expr:
    """Base node type.  Arithmetic operators build new nodes."""

    def __add__(self, other):
        return Add(self, _wrap(other))

    def __radd__(self, other):
        return Add(_wrap(other), self)

    def __sub__(self, other):
        return Add(self, Neg(_wrap(other)))

    def __rsub__(self, other):
        return Add(_wrap(other), Neg(self))

    def __mul__(self, other):
        return Mul(self, _wrap(other))

    def __rmul__(self, other):
        return Mul(_wrap(other), self)

    def __truediv__(self, other):
        return Div(self, _wrap(other))

    def __rtruediv__(self, other):
        return Div(_wrap(other), self)

    def __pow__(self, exponent):
        if isinstance(exponent, Expr):
            if not isinstance(exponent, Const):
                raise TypeError("power exponent must be numeric")
            exponent = exponent.value
        return Pow(self, float(exponent))

    def __neg__(self):
        return Neg(self)

    # Comparisons build predicates for Piecewise; equality stays structural
    # (dataclass __eq__), so expressions remain usable as dict keys.
    def __lt__(self, other):
        return Compare("<", self, _wrap(other))

    def __le__(self, other):
        return Compare("<=", self, _wrap(other))

    def __gt__(self, other):
        return Compare(">", self, _wrap(other))

    def __ge__(self, other):
        return Compare(">=", self, _wrap(other))

    def children(self):
        return tuple(
            getattr(self, f.name)
            for f in fields(self)
            if isinstance(getattr(self, f.name), Expr)
        )


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Time(Expr):
    pass


@dataclass(frozen=True)
class State(Expr):
    index: int


@dataclass(frozen=True)
class Param(Expr):
    index: int


@dataclass(frozen=True)
class Neg(Expr):
    a: Expr


@dataclass(frozen=True)
class Add(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class Mul(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class Div(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class Pow(Expr):
    """Power with a fixed numeric (integer or real) exponent."""

    base: Expr
    exponent: float

    def __post_init__(self):
        object.__setattr__(self, "exponent", float(self.exponent))


@dataclass(frozen=True)
class Exp(Expr):
    a: Expr


@dataclass(frozen=True)
class Log(Expr):
    a: Expr


@dataclass(frozen=True)
class Sin(Expr):
    a: Expr


@dataclass(frozen=True)
class Cos(Expr):
    a: Expr


@dataclass(frozen=True)
class Abs(Expr):
    a: Expr


_CMP_OPS = ("<", "<=", ">", ">=")


@dataclass(frozen=True)
class Compare(Expr):
    """Comparison predicate between two subexpressions.

    Only valid as a Piecewise guard; it is not a real-valued expression.
    """

    op: str
    a: Expr
    b: Expr

    def __post_init__(self):
        if self.op not in _CMP_OPS:
            raise ValueError(f"unsupported comparison {self.op!r}")


@dataclass(frozen=True)
class Piecewise(Expr):
    """Total case split: guarded branches tried in order, then the default.

    Exactly one default branch exists by construction.  Differentiation is
    branchwise with the predicates untouched, so the derivative at a
    predicate boundary takes the branch the predicate selects as written.
    """

    branches: tuple  # of (Compare, Expr) pairs
    default: Expr

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ValueError("piecewise needs at least one guarded branch")
        for cond, value in branches:
            if not isinstance(cond, Compare):
                raise TypeError("piecewise guard must be a comparison")
            if not isinstance(value, Expr):
                raise TypeError("piecewise branch must be an expression")
        if not isinstance(self.default, Expr):
            raise TypeError("piecewise default must be an expression")
        object.__setattr__(self, "branches", branches)

    def children(self):
        out = []
        for cond, value in self.branches:
            out.extend((cond, value))
        out.append(self.default)
        return tuple(out)


def piecewise(*args):
    """Build a Piecewise from alternating (cond, value) pairs and a default.

    ``piecewise(c1, v1, c2, v2, default)`` mirrors the textual syntax.
    """
    if len(args) < 3 or len(args) % 2 == 0:
        raise ValueError("piecewise needs cond/value pairs plus a default")
    pairs = tuple(
        (args[i], _wrap(args[i + 1])) for i in range(0, len(args) - 1, 2)
    )
    return Piecewise(pairs, _wrap(args[-1]))


# ---------------------------------------------------------------------------
# traversal helpers


def contains_symbol(e: Expr, sym: Expr) -> bool:
    """True if ``sym`` (a State/Param/Time node) occurs anywhere in ``e``."""
    if e == sym:
        return True
    return any(contains_symbol(c, sym) for c in e.children())


def _collect(e, kind, acc):
    if isinstance(e, kind):
        acc.add(e.index)
    for c in e.children():
        _collect(c, kind, acc)


def free_states(e: Expr) -> set:
    acc = set()
    _collect(e, State, acc)
    return acc


def free_params(e: Expr) -> set:
    acc = set()
    _collect(e, Param, acc)
    return acc


# ---------------------------------------------------------------------------
# evaluation (reference interpreter)


def evaluate(e: Expr, y, t, params, _memo=None):
    """Evaluate ``e`` at state ``y`` (sequence of scalars or arrays), time
    ``t`` and parameter vector ``params``.

    Shared subtrees are evaluated once.  All piecewise branches are
    evaluated and selected with ``np.where``; invalid-operation warnings in
    inactive branches are suppressed.
    """
    if _memo is None:
        _memo = {}
        with np.errstate(all="ignore"):
            return evaluate(e, y, t, params, _memo)
    key = id(e)
    hit = _memo.get(key)
    if hit is not None:
        return hit
    val = _eval_node(e, y, t, params, _memo)
    _memo[key] = val
    return val


def _eval_node(e, y, t, params, memo):
    ev = lambda c: evaluate(c, y, t, params, memo)
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Time):
        return t
    if isinstance(e, State):
        return y[e.index]
    if isinstance(e, Param):
        return params[e.index]
    if isinstance(e, Neg):
        return np.negative(ev(e.a))
    if isinstance(e, Add):
        return np.add(ev(e.a), ev(e.b))
    if isinstance(e, Mul):
        return np.multiply(ev(e.a), ev(e.b))
    if isinstance(e, Div):
        return np.divide(ev(e.a), ev(e.b))
    if isinstance(e, Pow):
        return np.power(ev(e.base), e.exponent)
    if isinstance(e, Exp):
        return np.exp(ev(e.a))
    if isinstance(e, Log):
        return np.log(ev(e.a))
    if isinstance(e, Sin):
        return np.sin(ev(e.a))
    if isinstance(e, Cos):
        return np.cos(ev(e.a))
    if isinstance(e, Abs):
        return np.abs(ev(e.a))
    if isinstance(e, Compare):
        a, b = ev(e.a), ev(e.b)
        if e.op == "<":
            return np.less(a, b)
        if e.op == "<=":
            return np.less_equal(a, b)
        if e.op == ">":
            return np.greater(a, b)
        return np.greater_equal(a, b)
    if isinstance(e, Piecewise):
        out = ev(e.default)
        for cond, value in reversed(e.branches):
            out = np.where(ev(cond), ev(value), out)
        return out
    raise TypeError(f"cannot evaluate node {type(e).__name__}")


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, wrt: Expr) -> Expr:
    """Exact symbolic partial derivative of ``e`` with respect to ``wrt``.

    ``wrt`` must be a State or Param symbol.  The result is not simplified;
    pass it through :func:`simplify` to clean up structural zeros.  The
    derivative of ``abs`` uses the sign convention sign(0) = 0, expressed as
    a piecewise node.
    """
    if not isinstance(wrt, (State, Param)):
        raise TypeError("derivative variable must be a state or parameter")
    return _diff(e, wrt)


def _sign(a: Expr) -> Expr:
    return Piecewise(
        ((Compare("<", a, Const(0.0)), Const(-1.0)),
         (Compare(">", a, Const(0.0)), Const(1.0))),
        Const(0.0),
    )


def _diff(e, wrt):
    if isinstance(e, (Const, Time)):
        return Const(0.0)
    if isinstance(e, (State, Param)):
        return Const(1.0) if e == wrt else Const(0.0)
    if isinstance(e, Neg):
        return Neg(_diff(e.a, wrt))
    if isinstance(e, Add):
        return Add(_diff(e.a, wrt), _diff(e.b, wrt))
    if isinstance(e, Mul):
        return Add(Mul(_diff(e.a, wrt), e.b), Mul(e.a, _diff(e.b, wrt)))
    if isinstance(e, Div):
        num = Add(Mul(_diff(e.a, wrt), e.b), Neg(Mul(e.a, _diff(e.b, wrt))))
        return Div(num, Mul(e.b, e.b))
    if isinstance(e, Pow):
        inner = _diff(e.base, wrt)
        return Mul(Mul(Const(e.exponent), Pow(e.base, e.exponent - 1.0)), inner)
    if isinstance(e, Exp):
        return Mul(Exp(e.a), _diff(e.a, wrt))
    if isinstance(e, Log):
        return Div(_diff(e.a, wrt), e.a)
    if isinstance(e, Sin):
        return Mul(Cos(e.a), _diff(e.a, wrt))
    if isinstance(e, Cos):
        return Neg(Mul(Sin(e.a), _diff(e.a, wrt)))
    if isinstance(e, Abs):
        return Mul(_sign(e.a), _diff(e.a, wrt))
    if isinstance(e, Piecewise):
        return Piecewise(
            tuple((cond, _diff(value, wrt)) for cond, value in e.branches),
            _diff(e.default, wrt),
        )
    raise TypeError(f"cannot differentiate node {type(e).__name__}")


# ---------------------------------------------------------------------------
# simplification


def simplify(e: Expr) -> Expr:
    """Value-preserving rewrite: constant folding, x+0, x*1, x*0, double
    negation, x+x -> 2*x and trivial power/piecewise collapses."""
    with np.errstate(all="ignore"):
        return _simplify(e)


def _simplify(e: Expr) -> Expr:
    if isinstance(e, (Const, Time, State, Param)):
        return e
    if isinstance(e, Neg):
        a = _simplify(e.a)
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Neg):
            return a.a
        return Neg(a)
    if isinstance(e, Add):
        a, b = _simplify(e.a), _simplify(e.b)
        if isinstance(a, Const) and isinstance(b, Const):
            return Const(a.value + b.value)
        if isinstance(a, Const) and a.value == 0.0:
            return b
        if isinstance(b, Const) and b.value == 0.0:
            return a
        if a == b:
            return Mul(Const(2.0), a)
        return Add(a, b)
    if isinstance(e, Mul):
        a, b = _simplify(e.a), _simplify(e.b)
        if isinstance(a, Const) and isinstance(b, Const):
            return Const(a.value * b.value)
        if isinstance(a, Const):
            if a.value == 0.0:
                return Const(0.0)
            if a.value == 1.0:
                return b
        if isinstance(b, Const):
            if b.value == 0.0:
                return Const(0.0)
            if b.value == 1.0:
                return a
        return Mul(a, b)
    if isinstance(e, Div):
        a, b = _simplify(e.a), _simplify(e.b)
        if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
            return Const(a.value / b.value)
        if isinstance(b, Const) and b.value == 1.0:
            return a
        return Div(a, b)
    if isinstance(e, Pow):
        base = _simplify(e.base)
        if e.exponent == 0.0:
            return Const(1.0)
        if e.exponent == 1.0:
            return base
        if isinstance(base, Const):
            return Const(float(np.power(base.value, e.exponent)))
        return Pow(base, e.exponent)
    if isinstance(e, Exp):
        a = _simplify(e.a)
        return Const(float(np.exp(a.value))) if isinstance(a, Const) else Exp(a)
    if isinstance(e, Log):
        a = _simplify(e.a)
        if isinstance(a, Const) and a.value > 0.0:
            return Const(float(np.log(a.value)))
        return Log(a)
    if isinstance(e, Sin):
        a = _simplify(e.a)
        return Const(float(np.sin(a.value))) if isinstance(a, Const) else Sin(a)
    if isinstance(e, Cos):
        a = _simplify(e.a)
        return Const(float(np.cos(a.value))) if isinstance(a, Const) else Cos(a)
    if isinstance(e, Abs):
        a = _simplify(e.a)
        return Const(abs(a.value)) if isinstance(a, Const) else Abs(a)
    if isinstance(e, Compare):
        return Compare(e.op, _simplify(e.a), _simplify(e.b))
    if isinstance(e, Piecewise):
        branches = tuple(
            (_simplify(cond), _simplify(value)) for cond, value in e.branches
        )
        default = _simplify(e.default)
        if all(value == default for _, value in branches):
            return default
        return Piecewise(branches, default)
    raise TypeError(f"cannot simplify node {type(e).__name__}")


def is_linear_in(e: Expr, i: int) -> bool:
    """True iff the derivative of ``e`` w.r.t. state ``i`` has no remaining
    occurrence of state ``i`` after simplification.

    Conservative: a symbolic occurrence counts as nonlinear even if its
    value would cancel.
    """
    d = simplify(differentiate(e, State(i)))
    return not contains_symbol(d, State(i))


# ---------------------------------------------------------------------------
# systems


class SystemValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RhsSystem:
    """A named system dy_i/dt = f_i(y, t, m) of pointwise ODE right-hand
    sides over states ``state_names`` with parameters ``param_names``.

    Invariant: every component references only declared state and parameter
    indices (checked at construction).
    """

    name: str
    state_names: tuple
    exprs: tuple
    param_names: tuple = ()
    param_defaults: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "state_names", tuple(self.state_names))
        object.__setattr__(self, "exprs", tuple(self.exprs))
        object.__setattr__(self, "param_names", tuple(self.param_names))
        object.__setattr__(
            self, "param_defaults", tuple(float(v) for v in self.param_defaults)
        )
        if len(self.state_names) < 1:
            raise SystemValidationError("system needs at least one state")
        if len(self.exprs) != len(self.state_names):
            raise SystemValidationError(
                f"{len(self.state_names)} states but {len(self.exprs)} equations"
            )
        if len(self.param_names) != len(self.param_defaults):
            raise SystemValidationError("every parameter needs a default value")
        m, p = self.m, self.p
        for i, f in enumerate(self.exprs):
            bad = {j for j in free_states(f) if not 0 <= j < m}
            if bad:
                raise SystemValidationError(
                    f"component {i} references undeclared states {sorted(bad)}"
                )
            bad = {k for k in free_params(f) if not 0 <= k < p}
            if bad:
                raise SystemValidationError(
                    f"component {i} references undeclared parameters {sorted(bad)}"
                )

    @property
    def m(self) -> int:
        return len(self.state_names)

    @property
    def p(self) -> int:
        return len(self.param_names)

    def default_params(self) -> np.ndarray:
        return np.array(self.param_defaults, dtype=float)

    def param_index(self, name: str) -> int:
        return self.param_names.index(name)

    def f(self, y, t, params=None):
        """Interpret all components at once; y is (m,) or (m, n)."""
        if params is None:
            params = self.default_params()
        y = np.asarray(y, dtype=float)
        vals = [np.asarray(evaluate(fi, y, t, params), dtype=float) for fi in self.exprs]
        shape = y[0].shape if y.ndim > 1 else ()
        return np.stack([np.broadcast_to(v, shape) for v in vals]) if shape \
            else np.array([float(v) for v in vals])

    def linear_flags(self):
        """Per-component flags: is f_i linear in its own state y_i."""
        return np.array(
            [is_linear_in(fi, i) for i, fi in enumerate(self.exprs)], dtype=bool
        )
