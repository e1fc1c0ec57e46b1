import numpy as np
import pytest
import sympy as sp

from varcheck.bundles import FiberMap, OneForm, Sode, sigma_immersion
from varcheck.errors import ClosednessError, IsotropyError, PreconditionError, TransversalityError
from varcheck.expr import parse
from varcheck.extend import (
    ReconstructedScalar,
    closed_form_extension,
    closed_form_extension_adapted,
    flow_extension,
    gauss_legendre_rule,
    hamiltonian_vector_field,
    image_deviation,
    path_integral,
    phase_space,
    reconstruct_lagrangian,
    verify_extension,
)
from varcheck.jets import VarSpace
from varcheck.mech import LagrangianDef

DISK = Sode(["th", "phi", "x", "y"], ["0", "0"], psi=["cos(phi)*thd", "sin(phi)*thd"])
DISK_F = FiberMap(["2*thd", "phid", "0", "0"])
DISK_LBAR = "(thd^2 + phid^2 - xd^2 - yd^2)/2 + thd*(cos(phi)*xd + sin(phi)*yd)"

PARTICLE = Sode(["x", "y", "z"], ["0", "-x*xd*yd/(1 + x^2)"], psi=["-x*yd"])
PARTICLE_F = FiberMap(
    ["xd - yd^2/(2*xd^2)*sqrt(1 + x^2)*(1 + x)", "sqrt(1 + x^2)*yd/xd", "-sqrt(1 + x^2)*yd/xd"]
)
PARTICLE_L = "xd^2/2 + yd^2/2*sqrt(1 + x^2)/xd*(1 + x)"
PARTICLE_LBAR = "xd^2/2 + (1 - x)*sqrt(1 + x^2)*yd^2/(2*xd) - sqrt(1 + x^2)*zd*yd/xd"


def _disk_samples(count=24, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (count, 6))
    p[:, 4:] += 0.5
    return p


def _particle_samples(count=24, seed=1):
    return np.random.default_rng(seed).uniform(0.5, 2, (count, 5))


# -- quadrature and reconstruction ---------------------------------------------


def test_gauss_legendre_rule_integrates_polynomials_exactly():
    s, w = gauss_legendre_rule()
    assert len(s) == 32 and w.sum() == pytest.approx(1.0, abs=1e-15)
    for k in range(16):
        assert np.dot(w, s**k) == pytest.approx(1 / (k + 1), rel=1e-13)


def test_gauss_legendre_against_symbolic_integral():
    s, w = gauss_legendre_rule()
    t = sp.symbols("t")
    f = sp.exp(sp.sin(3 * t)) / (1 + t**2)
    ref = float(sp.Integral(f, (t, 0, 1)).evalf(30))
    val = np.dot(w, sp.lambdify(t, f)(s))
    assert val == pytest.approx(ref, rel=1e-12)


def test_reconstruction_of_an_exact_form(rng):
    space = VarSpace(["a", "b"])
    S = parse("a^2*sin(b) + exp(a*b)")
    form = OneForm.exact(space, S)
    q = rng.uniform(-1, 1, (10, 2))
    base = np.array([0.2, -0.3])
    vals = reconstruct_lagrangian(form, base, q)
    ref = S.value(space, q) - float(S.value(space, base))
    assert np.max(np.abs(vals - ref)) < 1e-13


def test_reconstruction_refuses_non_closed_forms():
    space = VarSpace(["a", "b"])
    form = OneForm.from_exprs(space, ["b", "0"])
    with pytest.raises(ClosednessError):
        reconstruct_lagrangian(form, [0, 0], [[1, 1]])


def test_path_integral_of_non_closed_form_depends_on_path():
    space = VarSpace(["a", "b"])
    form = OneForm.from_exprs(space, ["-b/2", "a/2"])  # area form primitive
    loop = [[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]
    assert path_integral(form, loop) == pytest.approx(1.0, abs=1e-14)


def test_particle_reconstruction_recovers_l():
    P = _particle_samples()
    base = [1, 0, 0, 1, 1]
    vals = reconstruct_lagrangian(OneForm.mu(PARTICLE, PARTICLE_F), base, P)
    l = parse(PARTICLE_L)
    ref = l.value(PARTICLE.space, P) - float(l.value(PARTICLE.space, np.array([base]))[0])
    assert np.max(np.abs(vals - ref)) < 1e-8


def test_reconstructed_scalar_gradient_is_the_form(rng):
    space = VarSpace(["a"])
    form = OneForm.exact(space, "a^3")
    f = ReconstructedScalar(form, [0.0])
    assert f(np.array([[2.0]]))[0] == pytest.approx(8.0)
    assert f.gradient(np.array([[2.0]]))[0, 0] == pytest.approx(12.0)


# -- Hamiltonian fields ----------------------------------------------------------


def test_hamiltonian_vector_field_contracts_to_dphi(rng):
    coords = ["a", "b"]
    space = phase_space(coords)
    phi = parse("mut_a*bd + mu_b*a^2 - ad*b")
    X = hamiltonian_vector_field(phi, coords)
    pts = rng.uniform(-1, 1, (5, 8))
    Xv = np.stack([e.value(space, pts) for e in X], -1)
    n = 2
    # omega = dq ^ dmu + dqd ^ dmut; i_X omega = X^q dmu - X^mu dq + X^qd dmut - X^mut dqd
    i_x = np.concatenate([-Xv[:, 2 * n : 3 * n], -Xv[:, 3 * n :], Xv[:, :n], Xv[:, n : 2 * n]], -1)
    dphi = phi.eval_jet(space, pts).grad
    assert np.allclose(i_x, dphi, atol=1e-14)


# -- flow construction -----------------------------------------------------------


def test_disk_flow_extension_reproduces_lbar():
    res = flow_extension(
        sigma_immersion(DISK, DISK_F),
        ["xd - cos(phi)*thd + mut_x", "yd - sin(phi)*thd + mut_y"],
        DISK.coords,
        [[-0.5, 0.5], [-0.5, 0.5]],
        _disk_samples(),
    )
    assert res.passed, [r.summary() for r in res.reports.values()]
    assert image_deviation(res, DISK_LBAR).max_residual() < 1e-12
    # off the nodes: Newton inversion of the projection
    q = res.extras["tq_nodes"][:4] + 0.01
    assert image_deviation(res, DISK_LBAR, q).max_residual() < 1e-10
    hess = LagrangianDef(DISK_LBAR, DISK.coords).jet(q).hess
    assert np.allclose(res.hessian(q), hess, atol=1e-9)
    assert res.regularity["regular"]


def test_disk_flow_value_matches_lbar_up_to_constant():
    res = flow_extension(
        sigma_immersion(DISK, DISK_F),
        ["xd - cos(phi)*thd + mut_x", "yd - sin(phi)*thd + mut_y"],
        DISK.coords,
        [[-0.5, 0.5], [-0.5, 0.5]],
        _disk_samples(8),
    )
    q = res.extras["tq_nodes"]
    L = LagrangianDef(DISK_LBAR, DISK.coords)
    ref = L.L.value(L.space, q) - float(L.L.value(L.space, q[:1])[0])
    assert np.max(np.abs(res.value(q) - ref)) < 1e-9


def test_pure_velocity_constraints_give_no_graph():
    res = flow_extension(
        sigma_immersion(DISK, DISK_F),
        ["xd - cos(phi)*thd", "yd - sin(phi)*thd"],
        DISK.coords,
        [[-0.5, 0.5], [-0.5, 0.5]],
        _disk_samples(8),
    )
    assert not res.reports["graph"].passed


def test_flow_preconditions():
    sig = sigma_immersion(DISK, DISK_F)
    P = _disk_samples(4)
    with pytest.raises(PreconditionError):
        flow_extension(sig, ["mut_x - 1", "mut_y"], DISK.coords, [[0, 1], [0, 1]], P)
    with pytest.raises(TransversalityError):
        flow_extension(sig, ["mut_x", "2*mut_x"], DISK.coords, [[0, 1], [0, 1]], P)


def test_particle_flow_extension():
    res = flow_extension(
        sigma_immersion(PARTICLE, PARTICLE_F),
        ["mut_z + sqrt(1 + x^2)*yd/xd"],
        PARTICLE.coords,
        [[-0.5, 0.5]],
        _particle_samples(),
    )
    assert res.passed
    assert image_deviation(res, PARTICLE_LBAR).max_residual() < 1e-10


def test_flow_is_deterministic_in_seed():
    args = (
        sigma_immersion(PARTICLE, PARTICLE_F),
        ["mut_z + sqrt(1 + x^2)*yd/xd"],
        PARTICLE.coords,
        [[-0.5, 0.5]],
        _particle_samples(6),
    )
    a = flow_extension(*args, seed=3).extras["nodes"]
    b = flow_extension(*args, seed=3).extras["nodes"]
    c = flow_extension(*args, seed=4).extras["nodes"]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# -- closed-form construction ------------------------------------------------------


def test_adapted_closed_form_on_r2():
    L, reports, _ = closed_form_extension_adapted(
        ["x", "xd"], ["y"], ["xd", "x"], ["x"], [0, 0], np.random.default_rng(0).uniform(-1, 1, (8, 2)), f_expr="x*xd"
    )
    assert reports["base_function"].passed
    space = VarSpace(["x", "xd", "y"])
    pts = np.random.default_rng(1).uniform(-1, 1, (5, 3))
    assert np.allclose(L.value(space, pts), pts[:, 0] * pts[:, 1] + pts[:, 0] * pts[:, 2])


def test_adapted_closed_form_rejects_non_isotropic_section():
    with pytest.raises(IsotropyError):
        closed_form_extension_adapted(["x", "xd"], ["y"], ["xd", "0"], ["0"], [0, 0], np.zeros((1, 2)) + 0.3)


def test_closed_form_extension_r2_example(rng):
    sode = Sode(["x", "y"], ["0"], psi=["x*y + xd^2"])
    F = FiberMap(["xd + y", "x"])
    P = rng.uniform(-1, 1, (16, 3))
    ref = LagrangianDef("xd^2/2 + xd*y + x*yd", ["x", "y"])
    Q = rng.uniform(-1, 1, (8, 4))
    numeric = closed_form_extension(sode, F, [0, 0, 0], P)
    assert np.allclose(numeric.differential(Q), ref.jet(Q).grad, atol=1e-12)
    assert np.allclose(numeric.hessian(Q), ref.jet(Q).hess, atol=1e-10)
    symbolic = closed_form_extension(sode, F, [0, 0, 0], P, l_expr="xd^2/2 + xd*y + x*(x*y + xd^2)")
    assert np.allclose(symbolic.differential(Q), ref.jet(Q).grad, atol=1e-13)


def test_closed_form_requires_isotropy(rng):
    with pytest.raises(IsotropyError):
        closed_form_extension(DISK, FiberMap(["2*thd + th*phid", "phid", "0", "0"]), [0] * 6, _disk_samples(8))


def test_closed_form_disk_is_singular(rng):
    res = closed_form_extension(DISK, DISK_F, [0, 0, 0, 0, 1, 1], _disk_samples(8), l_expr="thd^2 + phid^2/2")
    assert res.passed and not res.regularity["regular"]


# -- verification by trajectories ----------------------------------------------


def test_verify_disk_extension_symbolic():
    res = closed_form_extension(DISK, DISK_F, [0, 0, 0, 0, 1, 1], _disk_samples(8), l_expr="thd^2 + phid^2/2")
    from varcheck.extend import _symbolic_result

    given = _symbolic_result(LagrangianDef(DISK_LBAR, DISK.coords), "GIVEN")
    rep = verify_extension(given, DISK, [[0, 0, 0, 0, 1, 1]], 2.0)
    assert rep.passed and rep.max_residual() < 1e-10
    assert res.lagrangian is not None


def test_verify_flags_states_off_the_constraint():
    from varcheck.extend import _symbolic_result

    given = _symbolic_result(LagrangianDef(PARTICLE_LBAR, PARTICLE.coords), "GIVEN")
    rep = verify_extension(given, PARTICLE, [[1, 0, 0, 1, 1, 0.3]], 0.5)
    assert not rep.passed
    assert rep.requirements["initial_states_on_M"].ok is False


def test_verify_numeric_flow_extension():
    res = flow_extension(
        sigma_immersion(PARTICLE, PARTICLE_F),
        ["mut_z + sqrt(1 + x^2)*yd/xd"],
        PARTICLE.coords,
        [[-0.5, 0.5]],
        _particle_samples(8),
    )
    rep = verify_extension(res, PARTICLE, [[1, 0, 0, 1, 1, -1]], 1.0, residual_stride=100)
    assert rep.passed, rep.summary()
