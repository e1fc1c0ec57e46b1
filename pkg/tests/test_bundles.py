import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from varcheck.bundles import (
    FiberMap,
    ImmersionSample,
    OneForm,
    Sode,
    alpha_q,
    alpha_q_inv,
    closedness_residual,
    isotropy_residual,
    kappa_q,
    lie_derivative_form,
    mu_form,
    numerical_rank,
    s_immersion,
    sigma_immersion,
    tf_gamma,
)
from varcheck.errors import SemanticError
from varcheck.jets import VarSpace

vectors = hnp.arrays(np.float64, 8, elements=st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(vectors)
def test_kappa_is_an_involution(p):
    assert np.array_equal(kappa_q(kappa_q(p)), p)


@settings(max_examples=50, deadline=None)
@given(vectors)
def test_alpha_inverse(p):
    assert np.array_equal(alpha_q_inv(alpha_q(p)), p)
    assert np.array_equal(alpha_q(alpha_q_inv(p)), p)


def _omega(n, pairs):
    w = np.zeros((4 * n, 4 * n))
    for a, b in pairs:
        for i in range(n):
            w[a * n + i, b * n + i] = 1.0
            w[b * n + i, a * n + i] = -1.0
    return w


@pytest.mark.parametrize("n", [1, 2, 3])
def test_alpha_is_a_symplectomorphism(n):
    # TT*Q (q, p, qdot, pdot): dqdot^dp + dq^dpdot ; T*TQ (q, qdot, mu, mut): dq^dmu + dqdot^dmut
    w_src = _omega(n, [(2, 1), (0, 3)])
    w_tgt = _omega(n, [(0, 2), (1, 3)])
    A = np.stack([alpha_q(e) for e in np.eye(4 * n)], axis=1)
    assert np.array_equal(A.T @ w_tgt @ A, w_src)


def test_tf_gamma_of_harmonic_oscillator():
    sode = Sode(["q"], ["-q"])
    F = FiberMap(["2*qd"])
    # (q, p, qdot, pdot) = (q, 2 qd, qd, -2 q)
    assert np.allclose(tf_gamma(sode, F, [0.3, 0.7]), [0.3, 1.4, 0.7, -0.6])


def _random_system():
    sode = Sode(["x", "y"], ["-x + y*xd", "sin(x)*yd^2"])
    F = FiberMap(["xd + x*yd", "yd^3 + cos(x)"])
    return sode, F


def test_mu_form_two_routes_agree(rng):
    """alpha(TF(Gamma)) against the Lie derivative of F*theta along Gamma."""
    sode, F = _random_system()
    pts = rng.uniform(-1, 1, (20, 4))
    a = mu_form(sode, F, pts)
    b = lie_derivative_form(sode, F, pts)
    assert np.allclose(np.concatenate([a.comps], -1), b.comps, atol=1e-13)


def test_exact_forms_are_closed(rng):
    space = VarSpace(["x", "y", "z"])
    form = OneForm.exact(space, "x*y*sin(z) + exp(x - y)")
    rep = closedness_residual(form, rng.uniform(-1, 1, (16, 3)))
    assert rep.passed and rep.max_residual() < 1e-13


def test_non_exact_form_is_detected(rng):
    space = VarSpace(["x", "y"])
    form = OneForm.from_exprs(space, ["y", "0"])  # d(y dx) = -dx^dy
    rep = closedness_residual(form, rng.uniform(-1, 1, (8, 2)))
    assert not rep.passed
    assert rep.max_residual() == pytest.approx(1.0)


def test_mu_closed_iff_variational(rng):
    sode = Sode(["q"], ["-q"])
    pts = rng.uniform(-1, 1, (10, 2))
    assert closedness_residual(OneForm.mu(sode, FiberMap(["qd"])), pts).passed
    assert not closedness_residual(OneForm.mu(sode, FiberMap(["q*qd"])), pts).passed


def test_sigma_and_s_immersions_have_equal_isotropy(rng):
    sode, F = _random_system()
    pts = rng.uniform(-1, 1, (12, 4))
    a = isotropy_residual(sigma_immersion(sode, F), pts, 1e-10)
    b = isotropy_residual(s_immersion(sode, F), pts, 1e-10)
    assert a.max_residual() == pytest.approx(b.max_residual(), rel=1e-10, abs=1e-14)
    assert a.extras["lagrangian_dimension"]


def test_isotropy_of_lagrangian_graph(rng):
    # graph of dS for S = x^2 y in T*R^2 ~ (x, y, p_x, p_y)
    params = VarSpace(["x", "y"])
    imm = ImmersionSample.from_exprs(params, ["x", "y", "2*x*y", "x^2"], chart=([0, 1], [2, 3]))
    rep = isotropy_residual(imm, rng.uniform(-1, 1, (10, 2)))
    assert rep.passed and rep.max_residual() == 0.0


def test_isotropy_detects_symplectic_surface(rng):
    params = VarSpace(["x", "y"])
    imm = ImmersionSample.from_exprs(params, ["x", "0", "y", "0"], chart=([0, 1], [2, 3]))
    rep = isotropy_residual(imm, rng.uniform(-1, 1, (4, 2)))
    assert not rep.passed and rep.max_residual() == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_numerical_rank_matches_svd(rows, cols, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, rows, cols)
    a = rng.normal(size=(rows, r)) @ rng.normal(size=(r, cols)) if r else np.zeros((rows, cols))
    assert numerical_rank(a) == np.linalg.matrix_rank(a) == r


def test_sode_validation():
    with pytest.raises(SemanticError):
        Sode(["x"], ["w"])
    with pytest.raises(SemanticError):
        Sode(["x", "y"], [], psi=["xd", "xd"])
    with pytest.raises(SemanticError):
        Sode(["x", "y"], ["0"])


def test_constrained_chart_layout():
    sode = Sode(["a", "b", "c"], ["0", "t"], psi=["ad"])
    assert sode.free == ("a", "b") and sode.constrained == ("c",)
    assert sode.space.names == ("t", "a", "b", "c", "ad", "bd")
    assert sode.time_dependent


def test_fibermap_component_count():
    with pytest.raises(SemanticError):
        FiberMap(["qd", "0"]).check(Sode(["q"], ["-q"]))
    assert len(FiberMap(["qd"]).perturbed(0, "q")) == 1
