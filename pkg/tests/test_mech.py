import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from varcheck.bundles import FiberMap, Sode
from varcheck.errors import SemanticError, SingularHessian
from varcheck.mech import (
    ChaplyginData,
    ConstrainedFlow,
    LagrangianDef,
    LinearConstraints,
    chaplygin_curvature,
    chaplygin_reduce,
    el_residual,
    el_sode,
    energy,
    hamiltonization_residual,
    integrate,
    nonholonomic_sode,
    stencil_derivative,
    vakonomic_system,
)

from systems import random_quadratic_system

DISK_L = "(thd^2 + phid^2 + xd^2 + yd^2)/2"
DISK_COORDS = ["th", "phi", "x", "y"]
DISK_CONSTRAINTS = ["xd - cos(phi)*thd", "yd - sin(phi)*thd"]


def _disk():
    return LagrangianDef(DISK_L, DISK_COORDS)


def test_rk4_is_fourth_order():
    osc = el_sode(LagrangianDef("qd^2/2 - q^2/2", ["q"]))
    errs = []
    for h in (0.1, 0.05):
        tr = integrate(osc, [1.0, 0.0], 2.0, h)
        errs.append(abs(tr.q[-1, 0] - np.cos(2.0)))
    assert 14 < errs[0] / errs[1] < 18


def test_integrate_hits_final_time_exactly():
    tr = integrate(el_sode(LagrangianDef("qd^2/2", ["q"])), [0.0, 1.0], 0.35, 0.1)
    assert tr.times[-1] == 0.35 and len(tr) == 5
    with pytest.raises(ValueError):
        integrate(el_sode(LagrangianDef("qd^2/2", ["q"])), [0.0, 1.0], 1.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_symbolic_and_jet_routes_agree(seed):
    _, _, lagr = random_quadratic_system(seed, n=2)
    pts = np.random.default_rng(seed).uniform(-1, 1, (6, 4))
    a = lagr.parts(pts, route="jets")
    b = lagr.parts(pts, route="symbolic")
    for k in ("Lq", "Lv", "W", "Lvq", "R"):
        assert np.allclose(a[k], b[k], atol=1e-12), k


def test_el_residual_vanishes_on_the_sode(rng):
    sode, _, lagr = random_quadratic_system(7, n=3)
    pts = rng.uniform(-1, 1, (10, 6))
    qdd = np.stack([e.value(sode.space, pts) for e in sode.gamma], -1)
    assert np.max(np.abs(el_residual(lagr, pts, qdd))) < 1e-12


def test_energy_is_conserved():
    lagr = LagrangianDef("(xd^2 + yd^2)/2 - (x^2 + y^2)^2/4", ["x", "y"])
    tr = integrate(el_sode(lagr), [1.0, 0.0, 0.0, 0.7], 3.0, 1e-3)
    E = energy(lagr, tr.states)
    assert np.ptp(E) < 1e-10


def test_time_dependent_el():
    lagr = LagrangianDef("qd^2/2 - q^2/2 + q*cos(2*t)", ["q"])
    tr = integrate(el_sode(lagr), [0.0, 0.0], 1.0, 1e-3)
    # q'' + q = cos 2t, q(0) = q'(0) = 0  ->  q = (cos t - cos 2t)/3
    assert tr.q[-1, 0] == pytest.approx((np.cos(1.0) - np.cos(2.0)) / 3, abs=1e-10)


def test_singular_hessian_is_reported():
    lagr = LagrangianDef("(xd - yd)^2/2", ["x", "y"])
    with pytest.raises(SingularHessian):
        el_sode(lagr).accelerations(np.array([[0, 0, 1, 0]]))
    tr = integrate(el_sode(lagr), [0, 0, 1, 0], 1.0, 0.1)
    assert tr.truncated and len(tr) == 1


def test_rolling_disk_matches_analytic_solution():
    nh = nonholonomic_sode(_disk(), DISK_CONSTRAINTS)
    tr = integrate(nh, [0, 0, 0, 0, 1, 1, 1, 0], 5.0, 1e-3)
    t = tr.times
    exact = np.stack([t, t, np.sin(t), 1 - np.cos(t)], -1)
    assert np.max(np.abs(tr.q - exact)) < 1e-9
    assert tr.max_constraint_residual < 1e-10


def test_nonholonomic_accelerations_against_sympy(rng):
    # free accelerations are zero and the multipliers are -d/dt(constraint velocities): lam = (x'', y'')
    nh = nonholonomic_sode(_disk(), DISK_CONSTRAINTS)
    pts = rng.uniform(-1, 1, (8, 8))
    pts[:, 6] = np.cos(pts[:, 1]) * pts[:, 4]
    pts[:, 7] = np.sin(pts[:, 1]) * pts[:, 4]
    qdd, lam = nh.solve(pts)
    phi, thd, phid = sp.symbols("phi thd phid")
    xdd = sp.diff(sp.cos(phi) * thd, phi) * phid
    ref = np.array([float(xdd.subs({phi: p[1], thd: p[4], phid: p[5]})) for p in pts])
    assert np.allclose(qdd[:, :2], 0, atol=1e-14)
    assert np.allclose(qdd[:, 2], ref, atol=1e-13)
    assert np.allclose(lam[:, 0], ref, atol=1e-13)


def test_linear_constraints_equal_expressions(rng):
    lc = LinearConstraints([["-cos(phi)", "0", "1", "0"], ["-sin(phi)", "0", "0", "1"]])
    a = nonholonomic_sode(_disk(), lc)
    b = nonholonomic_sode(_disk(), DISK_CONSTRAINTS)
    pts = rng.uniform(-1, 1, (5, 8))
    assert np.allclose(a.accelerations(pts), b.accelerations(pts), atol=1e-14)
    with pytest.raises(SemanticError):
        nonholonomic_sode(_disk(), LinearConstraints([["thd", "0", "1", "0"]]))


def test_vakonomic_with_zero_multipliers_matches_nonholonomic():
    vk = vakonomic_system(_disk(), DISK_CONSTRAINTS)
    nh = nonholonomic_sode(_disk(), DISK_CONSTRAINTS)
    x0 = [0, 0, 0, 0, 1, 1, 1, 0]
    a = integrate(vk, x0 + [-1.0, 0.0], 3.0, 1e-3)
    b = integrate(nh, x0, 3.0, 1e-3)
    assert np.max(np.abs(a.q - b.q)) < 1e-8
    assert np.nanmax(vk.trajectory_residual(a)) < 1e-7


def test_constrained_flow_fills_in_velocities():
    sode = Sode(DISK_COORDS, ["0", "0"], psi=["cos(phi)*thd", "sin(phi)*thd"])
    tr = integrate(ConstrainedFlow(sode), [0, 0, 0, 0, 1, 1], 1.0, 1e-3)
    assert tr.qd.shape == (len(tr), 4)
    assert tr.q[-1, 2] == pytest.approx(np.sin(1.0), abs=1e-10)


def test_stencil_is_fourth_order():
    errs = []
    for h in (0.02, 0.01):
        t = np.arange(0, 1 + h / 2, h)
        d = stencil_derivative(t, np.sin(t))
        errs.append(np.nanmax(np.abs(d - np.cos(t))))
    assert 12 < errs[0] / errs[1] < 20
    assert np.isnan(stencil_derivative(t, np.sin(t))[0])


def _chaplygin_disk():
    return ChaplyginData(
        ["th", "phi"], [["-cos(phi)", "0"], ["-sin(phi)", "0"]], "(thd^2 + phid^2 + xi1^2 + xi2^2)/2"
    )


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_disk_curvature_is_exact(th, phi):
    B = chaplygin_curvature(_chaplygin_disk(), np.array([th, phi]))
    assert B[0, 0, 1] == np.sin(phi) and B[1, 0, 1] == -np.cos(phi)
    assert B[0, 1, 0] == -B[0, 0, 1] and B[0, 0, 0] == 0


def test_reduced_disk_has_no_force_and_is_hamiltonian(rng):
    red = chaplygin_reduce(_chaplygin_disk())
    pts = rng.uniform(-1, 1, (16, 4))
    assert np.max(np.abs(red.force(pts))) < 1e-15
    F = red.lagr.legendre()
    assert hamiltonization_residual(red, F, pts, 1e-9).passed


def test_chaplygin_force_for_nonflat_connection(rng):
    # connection A = (-phi, 0) over (th, phi) with l = (thd^2 + phid^2 + xi^2)/2
    d = ChaplyginData(["th", "phi"], [["-phi", "0"]], "(thd^2 + phid^2 + xi1^2)/2")
    red = chaplygin_reduce(d)
    p = np.array([[0.2, 0.5, 1.0, 2.0]])
    # B_thphi = dA_th/dphi = -1; xi = phi*thd; Lambda_th = -xi*B*phid, Lambda_phi = -xi*B*(-thd)
    xi = 0.5 * 1.0
    assert np.allclose(red.force(p)[0], [xi * 2.0, -xi * 1.0])


def test_chaplygin_validation():
    with pytest.raises(SemanticError):
        ChaplyginData(["th"], [["x"]], "thd^2")
    with pytest.raises(SemanticError):
        ChaplyginData(["th", "phi"], [["1"]], "thd^2")
    with pytest.raises(SemanticError):
        ChaplyginData(["th"], [["1"]], "thd^2", structure_consts=[[[1.0]]])


def test_hamiltonization_of_plain_sode(rng):
    sode = Sode(["q"], ["-q"])
    assert hamiltonization_residual(sode, FiberMap(["qd"]), rng.uniform(-1, 1, (8, 2))).passed
