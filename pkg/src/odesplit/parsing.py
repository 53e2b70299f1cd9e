"""Line-oriented textual format for RhsSystem definitions.

::

    name mymodel
    state v
    state s
    param a = 0.13
    dv/dt = a*v*(1 - v) - s
    ds/dt = piecewise(v < 0.5, 0, v - s)

``state`` lines declare components in index order, ``param`` lines declare
named constants with defaults, and one ``d<state>/dt`` line per state gives
its right-hand side in infix syntax with ``+ - * / ^``, the functions
``exp log sin cos abs``, the time symbol ``t`` and
``piecewise(cond, value, ..., default)``.  ``#`` starts a comment.
"""

from __future__ import annotations

import re

from .expr import (
    Abs,
    Add,
    Compare,
    Const,
    Cos,
    Div,
    Exp,
    Expr,
    Log,
    Mul,
    Neg,
    Param,
    Piecewise,
    Pow,
    RhsSystem,
    Sin,
    State,
    Time,
)

__all__ = ["parse_system", "parse_expression", "format_system", "format_expression", "ParseError"]


class ParseError(ValueError):
    pass


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|<|>|[()+\-*/^,]))"
)

_FUNCTIONS = {"exp": Exp, "log": Log, "sin": Sin, "cos": Cos, "abs": Abs}


def _tokenize(text):
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"bad token at {text[pos:]!r}")
        pos = m.end()
        if m.lastgroup == "num":
            tokens.append(("num", float(m.group("num"))))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
    tokens.append(("end", None))
    return tokens


class _ExprParser:
    """Recursive-descent parser: comparison < additive < term < unary < power."""

    def __init__(self, tokens, states, params):
        self.tokens = tokens
        self.i = 0
        self.states = states
        self.params = params

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val = self.next()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}, got {val!r}")

    def parse(self):
        e = self.comparison()
        kind, val = self.peek()
        if kind != "end":
            raise ParseError(f"trailing input at {val!r}")
        return e

    def comparison(self):
        left = self.additive()
        kind, val = self.peek()
        if kind == "op" and val in ("<", "<=", ">", ">="):
            self.next()
            right = self.additive()
            return Compare(val, left, right)
        return left

    def additive(self):
        e = self.term()
        while True:
            kind, val = self.peek()
            if kind == "op" and val == "+":
                self.next()
                e = Add(e, self.term())
            elif kind == "op" and val == "-":
                self.next()
                e = Add(e, Neg(self.term()))
            else:
                return e

    def term(self):
        e = self.unary()
        while True:
            kind, val = self.peek()
            if kind == "op" and val == "*":
                self.next()
                e = Mul(e, self.unary())
            elif kind == "op" and val == "/":
                self.next()
                e = Div(e, self.unary())
            else:
                return e

    def unary(self):
        kind, val = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, val = self.peek()
        if kind == "op" and val == "^":
            self.next()
            exponent = self.unary()
            folded = _fold_const(exponent)
            if folded is None:
                raise ParseError("power exponent must be a numeric constant")
            return Pow(base, folded)
        return base

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return Const(val)
        if kind == "op" and val == "(":
            e = self.comparison()
            self.expect(")")
            return e
        if kind == "name":
            nkind, nval = self.peek()
            if nkind == "op" and nval == "(":
                return self.call(val)
            return self.symbol(val)
        raise ParseError(f"unexpected token {val!r}")

    def call(self, fname):
        self.expect("(")
        args = [self.comparison()]
        while True:
            kind, val = self.peek()
            if kind == "op" and val == ",":
                self.next()
                args.append(self.comparison())
            else:
                break
        self.expect(")")
        if fname in _FUNCTIONS:
            if len(args) != 1:
                raise ParseError(f"{fname} takes one argument")
            return _FUNCTIONS[fname](args[0])
        if fname == "piecewise":
            if len(args) < 3 or len(args) % 2 == 0:
                raise ParseError("piecewise needs cond/value pairs and a default")
            pairs = []
            for k in range(0, len(args) - 1, 2):
                cond = args[k]
                if not isinstance(cond, Compare):
                    raise ParseError("piecewise guard must be a comparison")
                pairs.append((cond, args[k + 1]))
            return Piecewise(tuple(pairs), args[-1])
        raise ParseError(f"unknown function {fname!r}")

    def symbol(self, name):
        if name == "t":
            return Time()
        if name in self.states:
            return State(self.states[name])
        if name in self.params:
            return Param(self.params[name])
        raise ParseError(f"unknown symbol {name!r}")


def _fold_const(e):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Neg):
        inner = _fold_const(e.a)
        return None if inner is None else -inner
    return None


def parse_expression(text, states, params) -> Expr:
    """Parse one infix expression; ``states``/``params`` map names to indices."""
    return _ExprParser(_tokenize(text), states, params).parse()


def parse_system(text: str) -> RhsSystem:
    """Parse the line-oriented system format into a validated RhsSystem."""
    name = "unnamed"
    state_names, param_names, param_defaults = [], [], []
    equations = {}
    deferred = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("name "):
                name = line[5:].strip()
            elif line.startswith("state "):
                state_names.append(line[6:].strip())
            elif line.startswith("param "):
                lhs, _, rhs = line[6:].partition("=")
                if not rhs:
                    raise ParseError("param line needs '= <value>'")
                param_names.append(lhs.strip())
                param_defaults.append(float(rhs))
            elif line.startswith("d") and "/dt" in line:
                lhs, _, rhs = line.partition("=")
                target = lhs.strip()
                if not (target.startswith("d") and target.endswith("/dt")):
                    raise ParseError(f"bad equation target {target!r}")
                deferred.append((target[1:-3], rhs.strip()))
            else:
                raise ParseError(f"unrecognized line {line!r}")
        except ParseError as err:
            raise ParseError(f"line {lineno}: {err}") from None
    states = {s: i for i, s in enumerate(state_names)}
    params = {s: i for i, s in enumerate(param_names)}
    for target, rhs in deferred:
        if target not in states:
            raise ParseError(f"equation for undeclared state {target!r}")
        if target in equations:
            raise ParseError(f"duplicate equation for {target!r}")
        equations[target] = parse_expression(rhs, states, params)
    missing = [s for s in state_names if s not in equations]
    if missing:
        raise ParseError(f"missing equations for {missing}")
    return RhsSystem(
        name=name,
        state_names=tuple(state_names),
        exprs=tuple(equations[s] for s in state_names),
        param_names=tuple(param_names),
        param_defaults=tuple(param_defaults),
    )


def format_expression(e: Expr, state_names, param_names) -> str:
    """Infix rendering that round-trips through :func:`parse_expression`."""

    def prec(node):
        if isinstance(node, (Const, Time, State, Param, Exp, Log, Sin, Cos, Abs, Piecewise, Pow)):
            return 4
        if isinstance(node, Neg):
            return 2
        if isinstance(node, (Mul, Div)):
            return 3
        if isinstance(node, Add):
            return 1
        if isinstance(node, Compare):
            return 0
        raise TypeError(type(node).__name__)

    def wrap(node, parent_prec):
        s = fmt(node)
        return f"({s})" if prec(node) < parent_prec else s

    def fmt(node):
        if isinstance(node, Const):
            return repr(node.value)
        if isinstance(node, Time):
            return "t"
        if isinstance(node, State):
            return state_names[node.index]
        if isinstance(node, Param):
            return param_names[node.index]
        if isinstance(node, Neg):
            # parenthesize anything that is not atomic so the unary minus
            # re-parses onto the same subtree
            return "-" + wrap(node.a, 4)
        if isinstance(node, Add):
            if isinstance(node.b, Neg):
                return wrap(node.a, 1) + " - " + wrap(node.b.a, 3)
            return wrap(node.a, 1) + " + " + wrap(node.b, 2)
        if isinstance(node, Mul):
            return wrap(node.a, 3) + "*" + wrap(node.b, 4)
        if isinstance(node, Div):
            return wrap(node.a, 3) + "/" + wrap(node.b, 4)
        if isinstance(node, Pow):
            return wrap(node.base, 5) + "^" + repr(node.exponent)
        for cls, fname in ((Exp, "exp"), (Log, "log"), (Sin, "sin"), (Cos, "cos"), (Abs, "abs")):
            if isinstance(node, cls):
                return f"{fname}({fmt(node.a)})"
        if isinstance(node, Compare):
            return f"{fmt(node.a)} {node.op} {fmt(node.b)}"
        if isinstance(node, Piecewise):
            parts = []
            for cond, value in node.branches:
                parts.append(fmt(cond))
                parts.append(fmt(value))
            parts.append(fmt(node.default))
            return "piecewise(" + ", ".join(parts) + ")"
        raise TypeError(type(node).__name__)

    return fmt(e)


def format_system(system: RhsSystem) -> str:
    lines = [f"name {system.name}"]
    lines += [f"state {s}" for s in system.state_names]
    lines += [
        f"param {n} = {repr(v)}"
        for n, v in zip(system.param_names, system.param_defaults)
    ]
    for sname, e in zip(system.state_names, system.exprs):
        lines.append(
            f"d{sname}/dt = {format_expression(e, system.state_names, system.param_names)}"
        )
    return "\n".join(lines) + "\n"
