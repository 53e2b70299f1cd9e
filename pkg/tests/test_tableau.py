import numpy as np
import pytest

from odesplit.tableau import (
    BUILTIN_NAMES,
    ButcherTableau,
    OrderCheck,
    TableauWarning,
    builtin,
    format_tableau,
    order_conditions,
    parse_tableau,
    stage_classes,
    validate,
)


def test_explicit_euler_valid():
    assert validate(builtin("explicit-euler")) == []


def test_upper_triangular_entry_reported():
    t = ButcherTableau("bad", 1, [[0.0, 0.5], [0.5, 0.5]], [0.5, 0.5], [0.5, 1.0])
    violations = validate(t)
    assert any("a[1,2]" in v for v in violations)


def test_b_sum_violation_reported():
    t = ButcherTableau("bad", 1, [[0.0]], [0.5], [0.0])
    assert any("sum(b)" in v for v in validate(t))


def test_rowsum_mismatch_warns_not_errors():
    t = ButcherTableau("odd-c", 1, [[0.0]], [1.0], [0.25])
    with pytest.warns(TableauWarning):
        assert validate(t) == []


def test_rk4_valid_against_invariants():
    t = builtin("rk4")
    assert validate(t) == []
    assert np.allclose(t.a.sum(axis=1), t.c, atol=1e-15)
    assert t.b.sum() == pytest.approx(1.0, abs=1e-15)


def test_order_conditions_euler():
    ee = builtin("explicit-euler")
    assert order_conditions(ee, 1).passed
    check = order_conditions(ee, 2)
    assert not check.passed
    assert check.failed_condition == "b.c = 1/2"
    assert check.value == 0.0


def test_order_conditions_rk4_all_eight():
    assert order_conditions(builtin("rk4"), 4).passed


def test_order_conditions_rejects_unsupported_order():
    with pytest.raises(ValueError):
        order_conditions(builtin("rk4"), 5)


DECLARED = {
    "explicit-euler": 1,
    "implicit-euler": 1,
    "crank-nicolson": 2,
    "rk4": 4,
    "esdirk3": 3,
    "esdirk4": 4,
}


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_pass_declared_order(name):
    t = builtin(name)
    assert validate(t) == []
    assert t.order == DECLARED[name]
    assert order_conditions(t, t.order).passed


@pytest.mark.parametrize("name", [n for n, p in DECLARED.items() if p < 4])
def test_builtins_fail_next_order(name):
    t = builtin(name)
    assert not order_conditions(t, t.order + 1).passed


def test_crank_nicolson_coefficients():
    t = builtin("crank-nicolson")
    assert t.s == 2
    assert np.array_equal(t.a, [[0.0, 0.0], [0.5, 0.5]])
    assert np.array_equal(t.b, [0.5, 0.5])
    assert np.array_equal(t.c, [0.0, 1.0])


def test_implicit_euler_coefficients():
    t = builtin("implicit-euler")
    assert t.s == 1 and t.a[0, 0] == 1.0 and t.b[0] == 1.0 and t.c[0] == 1.0


def test_esdirk_structure():
    for name in ("esdirk3", "esdirk4"):
        t = builtin(name)
        tags = stage_classes(t)
        assert tags[0] == "explicit"
        assert all(tag == "diagonally-implicit" for tag in tags[1:])
        diag = np.diag(t.a)[1:]
        assert np.all(diag == diag[0])  # constant nonzero diagonal
        assert np.array_equal(t.b, t.a[-1])  # stiffly accurate


def test_esdirk_l_stability():
    # |R(z)| -> 0 as z -> -inf for both stiff integrators
    for name in ("esdirk3", "esdirk4"):
        t = builtin(name)
        z = -1e8
        r = 1 + z * t.b @ np.linalg.solve(np.eye(t.s) - z * t.a, np.ones(t.s))
        assert abs(r) < 1e-6


def test_stage_classes_match_diagonal():
    t = builtin("crank-nicolson")
    assert stage_classes(t) == ("explicit", "diagonally-implicit")


def test_unknown_builtin():
    with pytest.raises(KeyError):
        builtin("dopri5")


def test_tableau_file_round_trip():
    t = builtin("esdirk4")
    text = format_tableau(t)
    again = parse_tableau(text)
    assert again.s == t.s and again.order == t.order
    assert np.array_equal(again.a, t.a)
    assert np.array_equal(again.b, t.b)
    assert np.array_equal(again.c, t.c)


def test_tableau_file_errors():
    with pytest.raises(ValueError):
        parse_tableau("")
    with pytest.raises(ValueError):
        parse_tableau("2 1 x\n0 0\n")  # missing rows
