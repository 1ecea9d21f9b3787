import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from rdmeflow.errors import ExpressionError, ModelRuntimeError
from rdmeflow.expr import (Binary, Call, Name, Num, Unary, check_identifiers, compile_rpn, evaluate,
                           parse_propensity, pretty_print)
from rdmeflow.solver import _eval_rpn


def ev(src, **env):
    return evaluate(parse_propensity(src), env)


def test_product():
    assert ev("k1*A", k1=2.0, A=3) == 6.0


def test_bimolecular_over_volume():
    assert ev("kfb*Cm*Cc/vol", kfb=1.0, Cm=2, Cc=5, vol=0.25) == 40.0


def test_unbalanced_paren():
    with pytest.raises(ExpressionError) as info:
        parse_propensity("k1*(A")
    assert "unbalanced parenthesis" in str(info.value)
    assert info.value.position == 5


@pytest.mark.parametrize("src,expected", [
    ("1+2*3", 7.0),
    ("(1+2)*3", 9.0),
    ("2^3^2", 64.0),      # same-precedence binary operators associate left
    ("-2^2", -4.0),       # ^ binds tighter than unary minus
    ("2^-1", 0.5),
    ("8/4/2", 1.0),
    ("5-3-1", 1.0),
    ("min(3, max(1, 2))", 2.0),
    ("pow(2, 10)", 1024.0),
    ("exp(0)", 1.0),
    ("-3*-2", 6.0),
    ("1.5e1 + .5", 15.5),
])
def test_precedence(src, expected):
    assert ev(src) == expected


@pytest.mark.parametrize("src,pos", [("k $ A", 2), ("A +", 3), ("(A))", 3), ("foo(A)", 0), ("min(A)", 0), ("", 0)])
def test_errors_carry_position(src, pos):
    with pytest.raises(ExpressionError) as info:
        parse_propensity(src)
    assert info.value.position == pos


def test_unresolved_identifier_position():
    tree = parse_propensity("k*A + B")
    with pytest.raises(ExpressionError) as info:
        check_identifiers(tree, ["A"], ["k"], "k*A + B")
    assert info.value.position == 6


def test_division_by_zero_is_runtime_error():
    with pytest.raises(ModelRuntimeError):
        ev("A/B", A=1, B=0)


NAMES = ["A", "B", "k", "vol"]

leaves = st.one_of(
    st.floats(0, 1e3, allow_nan=False, allow_infinity=False).map(Num),
    st.sampled_from(NAMES).map(lambda n: Name(n, 0)),
)


def _extend(children):
    return st.one_of(
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda t: Binary(*t)),
        children.map(lambda c: Unary("-", c)),
        st.tuples(st.sampled_from(["min", "max", "pow"]), children, children).map(lambda t: Call(t[0], (t[1], t[2]), 0)),
        children.map(lambda c: Call("exp", (c,), 0)),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)


@given(trees)
def test_pretty_print_round_trip(tree):
    assert parse_propensity(pretty_print(tree)) == tree


@given(trees, st.integers(0, 20), st.integers(0, 20), st.floats(0.01, 10), st.floats(0.01, 10))
def test_compiled_rpn_matches_tree(tree, a, b, k, vol):
    env = {"A": a, "B": b, "k": k, "vol": vol}
    try:
        expected = evaluate(tree, env)
    except (ModelRuntimeError, OverflowError, ZeroDivisionError):
        assume(False)
    assume(math.isfinite(expected))
    ops, args, depth = compile_rpn(tree, {"A": 0, "B": 1}, {"k": k})
    x = np.array([[a, b]], dtype=np.int64)
    got = _eval_rpn(0, len(ops), np.asarray(ops, np.int64), np.asarray(args, float), x, 0, vol,
                    np.zeros(max(depth, 1)))
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)
