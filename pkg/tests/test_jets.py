import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varcheck import jets
from varcheck.errors import DerivativeOrderError, DomainError
from varcheck.expr import parse
from varcheck.jets import Jet2, VarSpace, fd_oracle, is_symmetric, seed

from conftest import EXPRESSION_CORPUS, XYZ, box_points

finite = st.floats(min_value=-3, max_value=3, allow_nan=False)
positive = st.floats(min_value=0.2, max_value=3)


def _xy(x, y):
    return seed(VarSpace(["x", "y"]), [x, y])


def test_seed_gives_unit_gradients():
    a, b = _xy(2.0, 3.0)
    assert a.value == 2.0 and b.value == 3.0
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.hess, np.zeros((2, 2)))


def test_product_rule_exact():
    a, b = _xy(2.0, 3.0)
    p = a * b
    assert p.value == 6.0
    assert np.array_equal(p.grad, [3.0, 2.0])
    assert np.array_equal(p.hess, [[0.0, 1.0], [1.0, 0.0]])


def test_quotient_hessian():
    a, b = _xy(2.0, 4.0)
    q = a / b
    # d2(x/y)/dy2 = 2x/y^3, d2/dxdy = -1/y^2
    assert q.hess[1, 1] == pytest.approx(2 * 2.0 / 4.0**3)
    assert q.hess[0, 1] == pytest.approx(-1 / 16)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_corpus_matches_finite_differences(source, rng):
    e = parse(source)
    for p in box_points(rng, 20):
        j = e.eval_jet(XYZ, p)
        g, H = fd_oracle(e, XYZ, p, h=1e-4)
        scale = max(1.0, float(np.max(np.abs(j.grad))))
        assert np.max(np.abs(j.grad - g)) <= 1e-5 * scale
        hscale = max(1.0, float(np.max(np.abs(j.hess))))
        assert np.max(np.abs(j.hess - H)) <= 1e-5 * hscale
        assert is_symmetric(j.hess)


@pytest.mark.parametrize("source", EXPRESSION_CORPUS)
def test_batched_equals_pointwise(source, rng):
    e = parse(source)
    pts = box_points(rng, 5)
    jb = e.eval_jet(XYZ, pts)
    for k, p in enumerate(pts):
        j = e.eval_jet(XYZ, p)
        assert jb.value[k] == pytest.approx(float(j.value), rel=1e-14, abs=1e-14)
        assert np.allclose(jb.hess[k], j.hess, rtol=1e-13, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(finite, finite)
def test_hessian_symmetry_is_bitwise(x, y):
    a, b = _xy(x, y)
    f = jets.sin(a * b) * jets.exp(a - b) + (a * a * b) / (2.0 + jets.cos(b))
    assert is_symmetric(f.hess)


@settings(max_examples=60, deadline=None)
@given(positive, finite)
def test_exp_ln_roundtrip(x, y):
    a, b = _xy(x, y)
    f = jets.ln(jets.exp(a * b))
    g = a * b
    assert np.allclose(f.grad, g.grad, atol=1e-12)
    assert np.allclose(f.hess, g.hess, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(finite, finite)
def test_addition_commutes_and_distributes(x, y):
    a, b = _xy(x, y)
    l = a * (b + 2.0)
    r = a * b + 2.0 * a
    assert np.allclose(l.grad, r.grad) and np.allclose(l.hess, r.hess)
    assert np.array_equal((a + b).grad, (b + a).grad)


@settings(max_examples=40, deadline=None)
@given(positive)
def test_integer_power_matches_repeated_product(x):
    (a,) = seed(VarSpace(["x"]), [x])
    p = jets.power(a, 3)
    m = a * a * a
    assert p.value == pytest.approx(m.value)
    assert p.hess[0, 0] == pytest.approx(6 * x)


def test_domain_errors():
    (a,) = seed(VarSpace(["x"]), [-1.0])
    with pytest.raises(DomainError):
        jets.ln(a)
    with pytest.raises(DomainError):
        jets.sqrt(a)
    (z,) = seed(VarSpace(["x"]), [0.0])
    with pytest.raises(DomainError):
        1.0 / z
    with pytest.raises(DomainError):
        jets.absolute(z)


def test_partial_drops_hessian():
    a, b = _xy(1.0, 2.0)
    f = a * a * b
    d = f.partial(0)
    assert d.value == pytest.approx(4.0)  # 2xy
    assert np.allclose(d.grad, [4.0, 2.0])
    with pytest.raises(DerivativeOrderError):
        (d * a).hess


def test_batch_shapes():
    pts = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    a, b = seed(VarSpace(["x", "y"]), pts)
    f = a * b
    assert f.batch_shape == (3,)
    assert f.grad.shape == (3, 2) and f.hess.shape == (3, 2, 2)


def test_constant_jet():
    c = jets.constant(2.5, 3)
    assert isinstance(c, Jet2) and c.value == 2.5
    assert not c.grad.any() and not c.hess.any()


def test_fd_oracle_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_oracle(lambda p: p[0], VarSpace(["x"]), [1.0], h=0)


def test_varspace_rejects_duplicates():
    with pytest.raises(ValueError):
        VarSpace(["x", "x"])
