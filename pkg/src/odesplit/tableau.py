"""Butcher tableaux: data type, validation, order conditions, builtins.

Tableaux must be lower triangular (no stage may depend on later stages);
diagonal entries decide whether a stage is explicit or diagonally implicit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ButcherTableau",
    "TableauWarning",
    "stage_classes",
    "validate",
    "order_conditions",
    "OrderCheck",
    "builtin",
    "BUILTIN_NAMES",
    "parse_tableau",
    "format_tableau",
]

ROWSUM_TOL = 1e-14
ORDER_TOL = 1e-12


class TableauWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    order: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        b = np.array(self.b, dtype=float)
        c = np.array(self.c, dtype=float)
        s = len(b)
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError("inconsistent tableau shapes")
        if s < 1 or self.order < 1:
            raise ValueError("tableau needs s >= 1 and order >= 1")
        for arr in (a, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def s(self) -> int:
        return len(self.b)


def stage_classes(t: ButcherTableau):
    """Per-stage tags: 'explicit' where a_ii = 0, else 'diagonally-implicit'."""
    return tuple(
        "explicit" if t.a[i, i] == 0.0 else "diagonally-implicit"
        for i in range(t.s)
    )


def validate(t: ButcherTableau):
    """Check the structural invariants; returns a list of violation strings
    (empty when the tableau is valid).  A c_i != sum_j a_ij mismatch only
    warns, since the stepper uses c for stage times only."""
    violations = []
    for i in range(t.s):
        for j in range(i + 1, t.s):
            if t.a[i, j] != 0.0:
                violations.append(
                    f"upper-triangular entry a[{i + 1},{j + 1}] = {t.a[i, j]!r} must be 0"
                )
    if abs(t.b.sum() - 1.0) > ORDER_TOL:
        violations.append(f"sum(b) = {t.b.sum()!r} != 1")
    rowsum = t.a.sum(axis=1)
    bad = np.abs(rowsum - t.c) > ROWSUM_TOL
    if bad.any():
        idx = int(np.argmax(bad))
        warnings.warn(
            f"tableau {t.name}: c[{idx + 1}] = {t.c[idx]!r} != row sum {rowsum[idx]!r}",
            TableauWarning,
            stacklevel=2,
        )
    return violations


@dataclass(frozen=True)
class OrderCheck:
    passed: bool
    failed_condition: str = ""
    value: float = 0.0
    expected: float = 0.0


# (label, expected, weight function) for the rooted-tree conditions per order
def _conditions(p):
    conds = [("sum(b) = 1", 1.0, lambda a, b, c: b.sum())]
    if p >= 2:
        conds.append(("b.c = 1/2", 0.5, lambda a, b, c: b @ c))
    if p >= 3:
        conds += [
            ("b.c^2 = 1/3", 1 / 3, lambda a, b, c: b @ c**2),
            ("b.A.c = 1/6", 1 / 6, lambda a, b, c: b @ (a @ c)),
        ]
    if p >= 4:
        conds += [
            ("b.c^3 = 1/4", 0.25, lambda a, b, c: b @ c**3),
            ("(b*c).A.c = 1/8", 0.125, lambda a, b, c: (b * c) @ (a @ c)),
            ("b.A.c^2 = 1/12", 1 / 12, lambda a, b, c: b @ (a @ c**2)),
            ("b.A.A.c = 1/24", 1 / 24, lambda a, b, c: b @ (a @ (a @ c))),
        ]
    return conds


def order_conditions(t: ButcherTableau, p: int) -> OrderCheck:
    """Check the rooted-tree order conditions up to order p in {1,2,3,4};
    reports the first failing condition."""
    if p not in (1, 2, 3, 4):
        raise ValueError("order conditions implemented for p in {1,2,3,4}")
    for label, expected, fn in _conditions(p):
        value = float(fn(t.a, t.b, t.c))
        if abs(value - expected) > ORDER_TOL:
            return OrderCheck(False, label, value, expected)
    return OrderCheck(True)


# ---------------------------------------------------------------------------
# builtin schemes

# One-parameter stiffly-accurate ESDIRK3 family: explicit first stage,
# constant diagonal gamma, c = [0, 2g, 1, 1]; gamma is the root of
# g^3 - 3g^2 + 3g/2 - 1/6 in (1/3, 1), which makes the scheme L-stable.
_GAMMA3 = 0.43586652150845899941601945


def _esdirk3() -> ButcherTableau:
    g = _GAMMA3
    a32 = (1.0 - 2.0 * g) / (4.0 * g)
    a31 = 1.0 - g - a32
    b2 = -1.0 / (12.0 * g * (2.0 * g - 1.0))
    b3 = 0.5 - g - 2.0 * g * b2
    b1 = 1.0 - b2 - b3 - g
    a = [
        [0.0, 0.0, 0.0, 0.0],
        [g, g, 0.0, 0.0],
        [a31, a32, g, 0.0],
        [b1, b2, b3, g],
    ]
    return ButcherTableau("esdirk3", 3, a, a[-1], [0.0, 2.0 * g, 1.0, 1.0])


def _esdirk4() -> ButcherTableau:
    # Six-stage, stiffly accurate, L-stable ESDIRK with constant diagonal
    # 1/4; rational coefficients verified exactly against the order-4
    # rooted-tree conditions.
    a = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 4, 1 / 4, 0.0, 0.0, 0.0, 0.0],
        [8611 / 62500, -1743 / 31250, 1 / 4, 0.0, 0.0, 0.0],
        [5012029 / 34652500, -654441 / 2922500, 174375 / 388108, 1 / 4, 0.0, 0.0],
        [
            15267082809 / 155376265600,
            -71443401 / 120774400,
            730878875 / 902184768,
            2285395 / 8070912,
            1 / 4,
            0.0,
        ],
        [82889 / 524892, 0.0, 15625 / 83664, 69875 / 102672, -2260 / 8211, 1 / 4],
    ]
    c = [0.0, 1 / 2, 83 / 250, 31 / 50, 17 / 20, 1.0]
    return ButcherTableau("esdirk4", 4, a, a[-1], c)


def _builtins():
    return {
        "explicit-euler": ButcherTableau("explicit-euler", 1, [[0.0]], [1.0], [0.0]),
        "implicit-euler": ButcherTableau("implicit-euler", 1, [[1.0]], [1.0], [1.0]),
        "crank-nicolson": ButcherTableau(
            "crank-nicolson", 2, [[0.0, 0.0], [0.5, 0.5]], [0.5, 0.5], [0.0, 1.0]
        ),
        "rk4": ButcherTableau(
            "rk4",
            4,
            [
                [0.0, 0.0, 0.0, 0.0],
                [0.5, 0.0, 0.0, 0.0],
                [0.0, 0.5, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            [1 / 6, 1 / 3, 1 / 3, 1 / 6],
            [0.0, 0.5, 0.5, 1.0],
        ),
        "esdirk3": _esdirk3(),
        "esdirk4": _esdirk4(),
    }


BUILTIN_NAMES = tuple(_builtins().keys())


def builtin(name: str) -> ButcherTableau:
    """Return one of the predefined schemes by name."""
    table = _builtins()
    if name not in table:
        raise KeyError(
            f"unknown tableau {name!r}; available: {', '.join(table)}"
        )
    return table[name]


# ---------------------------------------------------------------------------
# textual tableau files: "s p name", s rows of a, one row of b, one of c


def parse_tableau(text: str) -> ButcherTableau:
    rows = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    rows = [r for r in rows if r]
    if not rows:
        raise ValueError("empty tableau file")
    s, p, name = int(rows[0][0]), int(rows[0][1]), " ".join(rows[0][2:])
    if len(rows) != 1 + s + 2:
        raise ValueError(f"expected {s} a-rows plus b and c, got {len(rows) - 1}")
    num = [[float(x) for x in r] for r in rows[1:]]
    a, b, c = num[:s], num[s], num[s + 1]
    if any(len(r) != s for r in a) or len(b) != s or len(c) != s:
        raise ValueError("tableau rows must all have s entries")
    return ButcherTableau(name or "file", p, a, b, c)


def format_tableau(t: ButcherTableau) -> str:
    lines = [f"{t.s} {t.order} {t.name}"]
    fmt = lambda row: " ".join(repr(float(x)) for x in row)
    lines += [fmt(row) for row in t.a]
    lines.append(fmt(t.b))
    lines.append(fmt(t.c))
    return "\n".join(lines) + "\n"
