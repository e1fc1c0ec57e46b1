import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from varcheck.errors import DomainError, InputError
from varcheck.expr import Expr, ParseError, UnboundVariableError, compile_scalars, parse, parse_guard
from varcheck.jets import VarSpace

from conftest import EXPRESSION_CORPUS, XYZ, box_points

SYM = {"ln": sp.log, "sqrt": sp.sqrt, "abs": sp.Abs, "pow": sp.Pow}
X, Y, Z = sp.symbols("x y z", real=True)


def to_sympy(e):
    return sp.sympify(e.pretty().replace("^", "**"), locals=SYM | {"x": X, "y": Y, "z": Z})


def sym_value(s, p):
    return float(s.subs({X: p[0], Y: p[1], Z: p[2]}).evalf())


@pytest.mark.parametrize(
    "source, env, expected",
    [
        ("-x^2", {"x": 3.0}, -9.0),
        ("2^-1", {}, 0.5),
        ("2^3^2", {}, 512.0),
        ("-2^2", {}, -4.0),
        ("(-2)^2", {}, 4.0),
        ("1 - 2 - 3", {}, -4.0),
        ("8/4/2", {}, 1.0),
        ("--x", {"x": 2.0}, 2.0),
        ("1.5e1 + .5", {}, 15.5),
        ("pow(2, 10)", {}, 1024.0),
    ],
)
def test_precedence_and_associativity(source, env, expected):
    assert parse(source).evaluate(**env) == pytest.approx(expected)


@pytest.mark.parametrize("source", ["2x", "x +", "(x", "x)", "sin()", "pow(x)", "foo(x)", "", "x $ y", "sin"])
def test_parse_errors(source):
    with pytest.raises(ParseError) as info:
        parse(source)
    assert isinstance(info.value, InputError)
    assert info.value.line == 1 and info.value.column >= 1


def test_parse_error_location_is_multiline_aware():
    with pytest.raises(ParseError) as info:
        parse("x +\n  * y")
    assert info.value.line == 2 and info.value.column == 3


def test_unbound_variable():
    e = parse("x + w")
    with pytest.raises(UnboundVariableError) as info:
        e.compile(XYZ)
    assert "w" in str(info.value)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_pretty_roundtrip(source, rng):
    e = parse(source)
    again = parse(e.pretty())
    for p in box_points(rng, 5):
        assert again.value(XYZ, p) == pytest.approx(float(e.value(XYZ, p)), rel=1e-14)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_symbolic_derivative_against_sympy(source, rng):
    e = parse(source)
    s = to_sympy(e)
    pts = box_points(rng, 4)
    for name, sym in zip("xyz", (X, Y, Z)):
        d = e.diff(name)
        ds = sp.diff(s, sym)
        for p in pts:
            assert float(d.value(XYZ, p)) == pytest.approx(sym_value(ds, p), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_jets_agree_with_symbolic_differentiation(source, rng):
    """Two independent routes to the same Hessian."""
    e = parse(source)
    pts = box_points(rng, 6)
    j = e.eval_jet(XYZ, pts)
    for a in range(3):
        for b in range(3):
            h = e.diff("xyz"[a]).diff("xyz"[b]).value(XYZ, pts)
            assert np.allclose(j.hess[:, a, b], h, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_codegen_matches_interpreter(source, rng):
    e = parse(source)
    f = compile_scalars([e], XYZ)
    for p in box_points(rng, 5):
        assert f(list(p))[0] == pytest.approx(float(e.value(XYZ, p)), rel=1e-14)


def test_substitute_and_rename():
    e = parse("x*y + z")
    s = e.substitute({"y": "2*x", "z": 1})
    assert s.evaluate(x=3.0) == pytest.approx(19.0)
    r = e.rename({"x": "u"})
    assert r.free_vars == frozenset({"u", "y", "z"})


def test_expr_is_immutable_and_hashable():
    e = parse("x + 1")
    with pytest.raises(AttributeError):
        e.source = "y"
    assert {e, parse("x + 1")} == {e}


def test_operator_overloads_build_trees():
    x = parse("x")
    e = (x * 2 + 1) ** 2 / (1 - x)
    assert e.evaluate(x=0.5) == pytest.approx((2.0) ** 2 / 0.5)
    assert (-x).evaluate(x=2.0) == -2.0


def test_domain_error_from_value():
    with pytest.raises(DomainError):
        parse("ln(x)").value(VarSpace(["x"]), np.array([-1.0]))


def test_guards():
    g = parse_guard("abs(x - y) > 0.3")
    space = VarSpace(["x", "y"])
    mask = g.holds(space, np.array([[0, 0], [0, 1], [1, 1.5]]))
    assert mask.tolist() == [False, True, True]
    with pytest.raises(ParseError):
        parse_guard("x + y")
    # evaluation failures count as excluded
    assert parse_guard("ln(x) < 10").holds(VarSpace(["x"]), np.array([[-1.0], [1.0]])).tolist() == [False, True]


@settings(max_examples=80, deadline=None)
@given(
    st.floats(min_value=-5, max_value=5),
    st.floats(min_value=-5, max_value=5),
    st.sampled_from(["+", "-", "*"]),
)
def test_binary_ops_match_python(a, b, op):
    e = parse(f"x {op} y")
    expected = {"+": a + b, "-": a - b, "*": a * b}[op]
    assert e.evaluate(x=a, y=b) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-3, max_value=3))
def test_simplified_is_value_preserving(v):
    e = parse("0*x + 1*x^1 + (x - x) + x/1")
    assert e.simplified().evaluate(x=v) == pytest.approx(2 * v)
    assert isinstance(e.simplified(), Expr)
