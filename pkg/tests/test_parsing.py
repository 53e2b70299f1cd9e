import math

import pytest

from odesplit.expr import Compare, Const, Piecewise, Pow, State, Time, evaluate
from odesplit.models import fhn_system, mito_system
from odesplit.parsing import (
    ParseError,
    format_expression,
    format_system,
    parse_expression,
    parse_system,
)

STATES = {"v": 0, "s": 1}
PARAMS = {"a": 0, "b": 1}


def test_parse_infix_precedence():
    e = parse_expression("1 + 2*v^2.0 - s/4", STATES, PARAMS)
    val = evaluate(e, [3.0, 8.0], 0.0, [])
    assert val == 1 + 2 * 9 - 2


def test_parse_functions_and_time():
    e = parse_expression("exp(-v) + sin(t)*cos(t) - abs(s) + log(2)", STATES, PARAMS)
    val = evaluate(e, [1.0, -2.0], 0.5, [])
    expect = math.exp(-1) + math.sin(0.5) * math.cos(0.5) - 2 + math.log(2)
    assert val == pytest.approx(expect, rel=1e-15)


def test_parse_piecewise_chain():
    e = parse_expression("piecewise(v < 0, 0, v > 1, 1, v)", STATES, PARAMS)
    assert isinstance(e, Piecewise)
    assert len(e.branches) == 2
    assert evaluate(e, [-1.0, 0.0], 0, []) == 0.0
    assert evaluate(e, [0.25, 0.0], 0, []) == 0.25
    assert evaluate(e, [2.0, 0.0], 0, []) == 1.0


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_expression("v +", STATES, PARAMS)
    with pytest.raises(ParseError):
        parse_expression("unknown_sym", STATES, PARAMS)
    with pytest.raises(ParseError):
        parse_expression("v ^ s", STATES, PARAMS)  # non-constant exponent
    with pytest.raises(ParseError):
        parse_expression("piecewise(v, 1, 2)", STATES, PARAMS)  # guard not cmp
    with pytest.raises(ParseError):
        parse_expression("piecewise(v < 1, 2)", STATES, PARAMS)  # no default
    with pytest.raises(ParseError):
        parse_expression("v ? s", STATES, PARAMS)


def test_negative_constant_exponent():
    e = parse_expression("v^-2", STATES, PARAMS)
    assert isinstance(e, Pow) and e.exponent == -2.0


def test_system_round_trip():
    text = """
# a comment
name demo
state v
state s
param a = 0.13
param b = 2.5e-3
dv/dt = a*v*(v - 0.5)*(1 - v) - b*s + piecewise(t < 1, 0, 0.05)
ds/dt = 0.013*(v - s)
"""
    sys = parse_system(text)
    assert sys.name == "demo"
    assert sys.state_names == ("v", "s")
    assert sys.param_defaults == (0.13, 0.0025)
    again = parse_system(format_system(sys))
    assert again.exprs == sys.exprs
    assert again.param_names == sys.param_names
    assert again.param_defaults == sys.param_defaults


@pytest.mark.parametrize("factory", [mito_system, fhn_system])
def test_builtin_models_round_trip(factory):
    sys = factory()
    again = parse_system(format_system(sys))
    assert again.exprs == sys.exprs


def test_system_errors():
    with pytest.raises(ParseError):
        parse_system("state v\n")  # missing equation
    with pytest.raises(ParseError):
        parse_system("state v\ndv/dt = 1\ndv/dt = 2\n")  # duplicate
    with pytest.raises(ParseError):
        parse_system("state v\ndw/dt = 1\n")  # undeclared target
    with pytest.raises(ParseError):
        parse_system("param a\n")  # missing default
    with pytest.raises(ParseError):
        parse_system("bogus line\n")


def test_format_expression_parenthesizes():
    e = parse_expression("-(v + s)*(v - s)", STATES, PARAMS)
    txt = format_expression(e, ("v", "s"), ())
    again = parse_expression(txt, STATES, PARAMS)
    assert again == e
