import numpy as np
import pytest

from odesplit.expr import Const, Mul, Neg, Param, RhsSystem, State, evaluate
from odesplit.kernel import compile_kernel, jacobian_exprs
from odesplit.models import fhn_system, mito_system, synthetic_stiff_system


def interp_f(system, y, t, params):
    return np.array([evaluate(e, y, t, params) for e in system.exprs])


def test_single_component_examples():
    sys = RhsSystem("d", ("y",), (Neg(State(0)),))
    k = compile_kernel(sys)
    assert k.f(np.array([2.0]), 0.0) == np.array([-2.0])
    assert k.diag_jac(np.array([123.0]), 0.0) == np.array([-1.0])
    assert k.full_jac(np.array([1.0]), 0.0).shape == (1, 1)


def test_kernel_matches_interpreter_bitwise_mito(rng):
    sys = mito_system()
    k = compile_kernel(sys)
    params = sys.default_params()
    for _ in range(20):
        y = rng.uniform(0.0, 250.0, size=4)
        got = k.f(y, 0.3, params)
        want = interp_f(sys, y, 0.3, params)
        assert np.array_equal(got, want)  # bitwise


def test_kernel_matches_interpreter_bitwise_batch(rng):
    sys = mito_system()
    k = compile_kernel(sys)
    params = sys.default_params()
    y = rng.uniform(0.0, 250.0, size=(4, 64))
    got = k.f(y, 0.0, params)
    want = np.stack([evaluate(e, y, 0.0, params) for e in sys.exprs])
    assert np.array_equal(got, want)


def test_jacobian_entries_match_their_source_trees(rng):
    sys = fhn_system()
    k = compile_kernel(sys)
    diag, full, param = jacobian_exprs(sys)
    params = sys.default_params()
    y = rng.uniform(-1.0, 1.0, size=(2, 16)) * 30.0
    got_diag = k.diag_jac(y, 0.0, params)
    got_full = k.full_jac(y, 0.0, params)
    got_param = k.param_jac(y, 0.0, params)
    for i in range(2):
        assert np.array_equal(
            got_diag[i], np.broadcast_to(evaluate(diag[i], y, 0.0, params), (16,))
        )
        for j in range(2):
            assert np.array_equal(
                got_full[i, j],
                np.broadcast_to(evaluate(full[i][j], y, 0.0, params), (16,)),
            )
        for kk in range(sys.p):
            assert np.array_equal(
                got_param[i, kk],
                np.broadcast_to(evaluate(param[i][kk], y, 0.0, params), (16,)),
            )


def test_chunk_path_equals_slow_path(rng):
    sys = synthetic_stiff_system(7)
    k = compile_kernel(sys)
    y = rng.standard_normal((7, 33))
    params = sys.default_params()
    slow = k.f(y, 0.5, params)
    out = np.empty_like(slow)
    scratch = k.make_scratch(64)
    k._eval_chunk("f", y, 0.5, params, out, scratch)
    assert np.array_equal(slow, out)


def test_aux_eval_consistent_with_entry_points(rng):
    sys = fhn_system()
    k = compile_kernel(sys)
    y = rng.uniform(-20.0, 60.0, size=(2, 5))
    params = sys.default_params()
    aux = k.aux_eval(y, 0.2, params)
    assert np.allclose(aux["f"], k.f(y, 0.2, params), rtol=0, atol=0)
    assert np.allclose(aux["diag"], k.diag_jac(y, 0.2, params), rtol=0, atol=0)
    assert np.allclose(aux["full"], k.full_jac(y, 0.2, params), rtol=0, atol=0)
    assert np.allclose(aux["df_dp"], k.param_jac(y, 0.2, params), rtol=0, atol=0)


def test_dimension_validation():
    sys = RhsSystem("d", ("y",), (Neg(State(0)),))
    k = compile_kernel(sys)
    with pytest.raises(ValueError):
        k.f(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        k.f(np.zeros(1), 0.0, params=np.zeros(3))


def test_scalar_constant_component():
    sys = RhsSystem("c", ("y",), (Const(4.25),))
    k = compile_kernel(sys)
    out = k.f(np.zeros((1, 9)), 0.0)
    assert np.array_equal(out, np.full((1, 9), 4.25))


def test_param_jacobian_of_unused_param_is_zero():
    sys = RhsSystem(
        "d", ("y",), (Mul(Param(0), State(0)),), ("lam", "unused"), (2.0, 0.0)
    )
    k = compile_kernel(sys)
    pj = k.param_jac(np.array([3.0]), 0.0)
    assert pj[0, 0] == 3.0
    assert pj[0, 1] == 0.0


# stress test: the register allocator (value numbering + last-use recycling)
# must agree with the tree interpreter bitwise on arbitrary expression DAGs
from hypothesis import given, settings
from hypothesis import strategies as st

from odesplit.expr import Abs, Compare, Cos, Exp, Piecewise, Pow, Sin, Time


def _expr_strategy():
    leaves = st.sampled_from(
        [State(0), State(1), Time(), Const(0.5), Const(-2.0), Const(1.0), Param(0)]
    )

    def extend(children):
        unary = children.flatmap(
            lambda a: st.sampled_from(
                [Neg(a), Sin(a), Cos(a), Exp(a), Abs(a), Pow(a, 2.0), Mul(a, a)]
            )
        )
        binary = st.tuples(children, children).flatmap(
            lambda ab: st.sampled_from(
                [
                    ab[0] + ab[1],
                    ab[0] * ab[1],
                    ab[0] / (Const(2.0) + Abs(ab[1])),
                    Piecewise(((Compare("<=", ab[0], ab[1]), ab[0]),), ab[1]),
                ]
            )
        )
        return unary | binary

    return st.recursive(leaves, extend, max_leaves=16)


@settings(max_examples=150, deadline=None)
@given(_expr_strategy(), _expr_strategy(), st.integers(0, 2**32 - 1))
def test_compiled_program_matches_interpreter_bitwise(e0, e1, seed):
    sys = RhsSystem("fuzz", ("a", "b"), (e0, e1), ("p",), (0.75,))
    k = compile_kernel(sys)
    gen = np.random.default_rng(seed)
    y = gen.uniform(-2.0, 2.0, size=(2, 5))
    params = sys.default_params()
    got = k.f(y, 0.3, params)
    want = np.stack(
        [np.broadcast_to(evaluate(expr, y, 0.3, params), (5,)) for expr in sys.exprs]
    )
    assert np.array_equal(got, want)
