"""Residual evaluators for the variationality conditions.

Every suite evaluates its equations as lists of additive terms at a batch of
sample points.  A residual is ``|sum| / max(1, max |term|)`` with the sum
computed exactly (``math.fsum``), so suites that share a term set produce
bit-identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundles import (
    FiberMap,
    ImmersionSample,
    OneForm,
    SodeJets,
    T_STAR_TQ,
    closedness_residual,
    isotropy_residual,
    numerical_rank,
)
from .errors import SemanticError
from .expr import as_expr
from . import jets
from .jets import VarSpace
from .reports import ConditionReport, EquationAccumulator, Stat, sweep

__all__ = [
    "MultiplierData",
    "multiplier_matrix",
    "helmholtz_classic",
    "l_conditions",
    "t_conditions",
    "ch_conditions",
    "tc_conditions",
    "holonomic_check",
    "cartan_two_form_check",
    "douglas_case_iv_determinant",
    "symmetric_a_defect",
    "DEFAULT_TOLERANCE",
    "DET_THRESHOLD",
]

DEFAULT_TOLERANCE = 1e-9
# |det g| or a rank pivot below this counts as singular
DET_THRESHOLD = 1e-10


@dataclass
class MultiplierData:
    g: np.ndarray
    nabla: np.ndarray
    phi: np.ndarray


def _prepare(sode, fibermap, require_m0=False, section="checks"):
    if fibermap is None:
        raise SemanticError("a fibre map is required", section="fibermap")
    fibermap.check(sode)
    if require_m0 and sode.m:
        raise SemanticError("this suite applies to unconstrained systems only", section=section)


def _lift(sode, samples):
    """Time-lift an autonomous system, padding samples with t = 0 if needed."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if sode.time_dependent:
        return sode, samples
    lifted = sode.as_time_dependent()
    if samples.shape[-1] == sode.space.dim:
        samples = np.concatenate([np.zeros((len(samples), 1)), samples], axis=1)
    return lifted, samples


def _drop_time(sode, samples):
    """View a time-independent system autonomously, dropping a t column if present."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if not sode.time_dependent:
        return sode, samples
    auto = sode.as_autonomous()
    if samples.shape[-1] == sode.space.dim:
        samples = samples[:, 1:]
    return auto, samples


def _g(sj):
    s = sj.sode
    k = s.n - s.m
    return np.stack([np.stack([sj.dv(sj.F[i], b) for b in range(k)], axis=-1) for i in range(s.n)], axis=-2)


def _rank_stats(mats):
    ranks = [numerical_rank(m) for m in mats]
    return np.asarray(ranks, dtype=float)


def _finish(family, tolerance, out, skipped, reasons, eq_names):
    rep = ConditionReport(family, tolerance)
    rep.samples_used = len(next(iter(out.values()))) if out else 0
    rep.samples_skipped = skipped
    rep.skip_reasons = reasons
    for name in eq_names:
        rep.equations[name] = Stat.of(out.get(name, []))
    return rep


# -- classical Helmholtz ------------------------------------------------------


def _multipliers(sj):
    s = sj.sode
    n = s.n
    g = _g(sj)
    dG_dv = np.stack([np.stack([sj.dv(sj.gamma[k], j) for j in range(n)], axis=-1) for k in range(n)], axis=-2)
    nabla = -0.5 * dG_dv  # nabla[k, j]
    phi = np.empty_like(nabla)
    for k in range(n):
        for j in range(n):
            partial = sj.gamma[k].partial(s.v_index(j))
            total = sj.lie(partial) - 2.0 * sj.dq(sj.gamma[k], j)
            for i in range(n):
                total = total - 0.5 * dG_dv[..., i, j] * dG_dv[..., k, i]
            phi[..., k, j] = total
    return g, nabla, phi, dG_dv


def multiplier_matrix(sode, fibermap, point):
    """g_ij = dF_i/dv^j with the connection and curvature matrices of the SODE."""
    _prepare(sode, fibermap, require_m0=True)
    point = np.asarray(point, dtype=float)
    sj = SodeJets(sode, point, fibermap)
    g, nabla, phi, _ = _multipliers(sj)
    if point.ndim == 1:
        return MultiplierData(g[0], nabla[0], phi[0])
    return MultiplierData(g, nabla, phi)


def helmholtz_classic(sode, fibermap, samples, tolerance=DEFAULT_TOLERANCE):
    """Helmholtz conditions for the multiplier g_ij = dF_i/dv^j."""
    _prepare(sode, fibermap, require_m0=True)
    n = sode.n
    names = ["H_symmetry", "H_dg_symmetry", "H_nabla", "H_phi"]

    def fn(batch):
        sj = SodeJets(sode, batch, fibermap)
        g, nabla, phi, dG_dv = _multipliers(sj)
        acc = EquationAccumulator(sj.batch)
        for name in names:
            acc.declare(name)
        dets = np.abs(np.linalg.det(g))
        for i in range(n):
            for j in range(n):
                if i < j:
                    acc.add("H_symmetry", [g[..., i, j], -g[..., j, i]])
                for k in range(j + 1, n):
                    acc.add(
                        "H_dg_symmetry",
                        [sj.d2(sj.F[i], "v", j, "v", k), -sj.d2(sj.F[i], "v", k, "v", j)],
                    )
                gij = sj.F[i].partial(sode.v_index(j))
                terms = sj.gamma_of_terms(gij)
                terms += [-nabla[..., k, j] * g[..., i, k] for k in range(n)]
                terms += [-nabla[..., k, i] * g[..., k, j] for k in range(n)]
                acc.add("H_nabla", terms)
                if i < j:
                    terms = []
                    for k in range(n):
                        for ph in _phi_terms(sj, dG_dv, k, j):
                            terms.append(g[..., i, k] * ph)
                        for ph in _phi_terms(sj, dG_dv, k, i):
                            terms.append(-g[..., j, k] * ph)
                    acc.add("H_phi", terms)
        out = dict(acc.values)
        out["_det"] = dets
        out["_rank"] = _rank_stats(g)
        return out

    out, skipped, reasons, _ = sweep(samples, fn, sode.space.names)
    rep = _finish("HELMHOLTZ_CLASSIC", tolerance, out, skipped, reasons, names)
    _det_requirements(rep, out, n)
    return rep


def _phi_terms(sj, dG_dv, k, j):
    s = sj.sode
    partial = sj.gamma[k].partial(s.v_index(j))
    terms = sj.gamma_of_terms(partial)
    terms.append(-2.0 * sj.dq(sj.gamma[k], j))
    terms += [-0.5 * dG_dv[..., i, j] * dG_dv[..., k, i] for i in range(s.n)]
    return terms


def _det_requirements(rep, out, n):
    dets = out.get("_det", np.array([]))
    ranks = out.get("_rank", np.array([]))
    min_det = float(dets.min()) if dets.size else 0.0
    rep.extras["min_abs_det_g"] = min_det
    rep.require("min_abs_det_g", min_det, DET_THRESHOLD, ">")
    rep.require("min_rank_g", float(ranks.min()) if ranks.size else 0.0, n, ">=")


# -- L conditions --------------------------------------------------------------


def l_conditions(sode, fibermap, samples, tolerance=DEFAULT_TOLERANCE):
    """Closedness of mu_{Gamma,F} written out as three families of identities."""
    _prepare(sode, fibermap, require_m0=True)
    sode, samples = _drop_time(sode, samples)
    n = sode.n
    names = ["L1", "L2", "L3"]

    def fn(batch):
        sj = SodeJets(sode, batch, fibermap)
        F, G = sj.F, sj.gamma
        qd = [v.value for v in sj.velocity]
        acc = EquationAccumulator(sj.batch)
        for name in names:
            acc.declare(name)

        def l2_side(i, k):
            t = [sj.d2(F[i], "q", k, "q", j) * qd[j] for j in range(n)]
            t += [sj.d2(F[i], "q", k, "v", j) * G[j].value for j in range(n)]
            t += [sj.dv(F[i], j) * sj.dq(G[j], k) for j in range(n)]
            return t

        for i in range(n):
            for k in range(n):
                if i < k:
                    acc.add("L1", [sj.dv(F[i], k), -sj.dv(F[k], i)])
                    acc.add("L2", l2_side(i, k) + [-x for x in l2_side(k, i)])
                rhs = [sj.d2(F[i], "v", k, "q", j) * qd[j] for j in range(n)]
                rhs.append(sj.dq(F[i], k))
                rhs += [sj.d2(F[i], "v", k, "v", j) * G[j].value for j in range(n)]
                rhs += [sj.dv(F[i], j) * sj.dv(G[j], k) for j in range(n)]
                acc.add("L3", [sj.dq(F[k], i)] + [-x for x in rhs])
        out = dict(acc.values)
        g = _g(sj)
        out["_det"] = np.abs(np.linalg.det(g))
        out["_rank"] = _rank_stats(g)
        return out

    out, skipped, reasons, _ = sweep(samples, fn, sode.space.names)
    rep = _finish("L_CONDITIONS", tolerance, out, skipped, reasons, names)
    _det_requirements(rep, out, n)
    return rep


def symmetric_a_defect(sode, fibermap, samples):
    """max |a_ij - a_ji| with a_ij = dF_i/dq^j + 1/2 g_ik dGamma^k/dv^j."""
    _prepare(sode, fibermap, require_m0=True)
    n = sode.n

    def fn(batch):
        sj = SodeJets(sode, batch, fibermap)
        g = _g(sj)
        a = np.empty((sj.batch, n, n))
        for i in range(n):
            for j in range(n):
                a[:, i, j] = sj.dq(sj.F[i], j) + 0.5 * sum(g[:, i, k] * sj.dv(sj.gamma[k], j) for k in range(n))
        return {"a": np.max(np.abs(a - np.swapaxes(a, 1, 2)), axis=(1, 2))}

    out, _, _, _ = sweep(samples, fn, sode.space.names)
    return out.get("a", np.array([]))


# -- time-dependent -----------------------------------------------------------


def t_conditions(sode, fibermap, samples, tolerance=DEFAULT_TOLERANCE):
    """Conditions T1-T3 for a time-dependent SODE (autonomous ones are lifted)."""
    _prepare(sode, fibermap, require_m0=True)
    sode, samples = _lift(sode, samples)
    n = sode.n
    names = ["T1", "T2", "T3"]

    def fn(batch):
        sj = SodeJets(sode, batch, fibermap)
        F, G = sj.F, sj.gamma
        qd = [v.value for v in sj.velocity]
        acc = EquationAccumulator(sj.batch)
        for name in names:
            acc.declare(name)

        def t3_side(j, i):
            t = [sj.d2(F[j], "q", i, "t", 0)]
            t += [qd[k] * sj.d2(F[j], "q", i, "q", k) for k in range(n)]
            t += [sj.dq(G[k], i) * sj.dv(F[j], k) for k in range(n)]
            t += [G[k].value * sj.d2(F[j], "q", i, "v", k) for k in range(n)]
            return t

        for i in range(n):
            for j in range(n):
                if i < j:
                    acc.add("T1", [sj.dv(F[j], i), -sj.dv(F[i], j)])
                    acc.add("T3", t3_side(j, i) + [-x for x in t3_side(i, j)])
                t = [sj.d2(F[j], "v", i, "t", 0), sj.dq(F[j], i)]
                t += [qd[k] * sj.d2(F[j], "v", i, "q", k) for k in range(n)]
                t += [sj.dv(G[k], i) * sj.dv(F[j], k) for k in range(n)]
                t += [G[k].value * sj.d2(F[j], "v", i, "v", k) for k in range(n)]
                t.append(-sj.dq(F[i], j))
                acc.add("T2", t)
        out = dict(acc.values)
        g = _g(sj)
        out["_det"] = np.abs(np.linalg.det(g))
        out["_rank"] = _rank_stats(g)
        return out

    out, skipped, reasons, _ = sweep(samples, fn, sode.space.names)
    rep = _finish("T_CONDITIONS", tolerance, out, skipped, reasons, names)
    _det_requirements(rep, out, n)
    return rep


# -- constrained ----------------------------------------------------------------


def _constrained_terms(sj, family_names):
    """CH/TC residual terms; time derivatives enter when the chart has time."""
    s = sj.sode
    n, m = s.n, s.m
    k_free = n - m
    F, psi = sj.F, sj.psi
    acc = EquationAccumulator(sj.batch)
    c1, c2, c3 = family_names
    for name in family_names:
        acc.declare(name)
    for a in range(k_free):
        for b in range(a + 1, k_free):
            t = [sj.dv(F[a], b), -sj.dv(F[b], a)]
            for al in range(m):
                fa = F[k_free + al]
                t.append(sj.dv(psi[al], a) * sj.dv(fa, b))
                t.append(-sj.dv(psi[al], b) * sj.dv(fa, a))
            acc.add(c1, t)
    for i in range(n):
        for j in range(i + 1, n):
            t = sj.gamma_of_derivative_terms(F[i], "q", j)
            t += [-x for x in sj.gamma_of_derivative_terms(F[j], "q", i)]
            for al in range(m):
                fa = F[k_free + al]
                t.append(sj.dq(psi[al], i) * sj.dq(fa, j))
                t.append(-sj.dq(psi[al], j) * sj.dq(fa, i))
            acc.add(c2, t)
    for i in range(n):
        for a in range(k_free):
            t = sj.gamma_of_derivative_terms(F[i], "v", a)
            t.append(-sj.dq(F[a], i))
            for al in range(m):
                fa = F[k_free + al]
                t.append(sj.dq(psi[al], i) * sj.dv(fa, a))
                t.append(-sj.dv(psi[al], a) * sj.dq(fa, i))
            acc.add(c3, t)
    out = dict(acc.values)
    g = _g(sj)
    out["_rank"] = _rank_stats(g)
    return out


def _rank_requirement(rep, out, k):
    ranks = out.get("_rank", np.array([]))
    r = float(ranks.min()) if ranks.size else 0.0
    rep.extras["min_rank_dF_dv"] = r
    rep.extras["expected_rank"] = k
    rep.require("min_rank_dF_dv", r, k, ">=")


def ch_conditions(sode, fibermap, samples, tolerance=DEFAULT_TOLERANCE):
    """Constrained Helmholtz conditions CH1-CH3 (with m = 0 they are L1-L3)."""
    _prepare(sode, fibermap)
    sode, samples = _drop_time(sode, samples)
    names = ["CH1", "CH2", "CH3"]
    out, skipped, reasons, _ = sweep(
        samples, lambda b: _constrained_terms(SodeJets(sode, b, fibermap), names), sode.space.names
    )
    rep = _finish("CH_CONDITIONS", tolerance, out, skipped, reasons, names)
    _rank_requirement(rep, out, sode.n - sode.m)
    return rep


def tc_conditions(sode, fibermap, samples, tolerance=DEFAULT_TOLERANCE):
    """Time-dependent constrained conditions TC1-TC3 (autonomous systems are lifted)."""
    _prepare(sode, fibermap)
    sode, samples = _lift(sode, samples)
    names = ["TC1", "TC2", "TC3"]

    def fn(batch):
        # TC2/TC3 are CH2/CH3 with the time derivative included and the sides
        # swapped; residuals are absolute so the sign does not matter
        return _constrained_terms(SodeJets(sode, batch, fibermap), names)

    out, skipped, reasons, _ = sweep(samples, fn, sode.space.names)
    rep = _finish("TC_CONDITIONS", tolerance, out, skipped, reasons, names)
    _rank_requirement(rep, out, sode.n - sode.m)
    return rep


# -- holonomic -----------------------------------------------------------------


def holonomic_check(sode_tn, big_n, small_n, f_full, samples, tolerance=DEFAULT_TOLERANCE, ambient=None):
    """Variationality along TN in TQ versus on TN intrinsically.

    ``sode_tn`` lives on TN with the ``small_n`` intrinsic coordinates.  The
    ambient configuration space has ``big_n`` coordinates in adapted form,
    the intrinsic ones first and the normal ones (identically zero on TN,
    names ``ambient[small_n:]``) last.  ``f_full`` has ``big_n`` momentum
    components over TN.
    """
    if sode_tn.m:
        raise SemanticError("the intrinsic system must be unconstrained", section="space")
    if sode_tn.n != small_n or big_n <= small_n:
        raise SemanticError(f"expected {small_n} intrinsic coordinates out of {big_n}", section="space")
    if len(f_full) != big_n:
        raise SemanticError(f"fibre map must have {big_n} components", section="fibermap")
    f_small = FiberMap(f_full.components[:small_n], (f_full.name or "F") + "|TN")
    rep = ConditionReport("HOLONOMIC", tolerance)
    intrinsic = l_conditions(sode_tn, f_small, samples, tolerance)
    for k, v in intrinsic.equations.items():
        rep.equations["intrinsic_" + k] = v
    # intrinsic closedness of mu_{Gamma,f}
    closed = closedness_residual(OneForm.mu(sode_tn, f_small), samples)
    rep.equations["intrinsic_closedness"] = closed.equations["antisymmetric_derivative"]
    # extrinsic: Sigma of the full F inside T*TQ, with the normal coordinates frozen at 0
    imm = _holonomic_sigma(sode_tn, big_n, small_n, f_full)
    iso = isotropy_residual(imm, samples)
    rep.equations["extrinsic_isotropy"] = iso.equations["pullback_symplectic_form"]
    rep.samples_used = intrinsic.samples_used
    rep.samples_skipped = intrinsic.samples_skipped
    rep.skip_reasons = intrinsic.skip_reasons
    for k, r in intrinsic.requirements.items():
        rep.requirements["f_" + k] = r
    rep.extras["intrinsic"] = intrinsic.to_dict()
    rep.extras["extrinsic_rank_min"] = iso.extras["rank_min"]
    rep.extras["ambient_coordinates"] = list(ambient) if ambient else None
    return rep


def _holonomic_sigma(sode_tn, big_n, small_n, f_full):
    space = sode_tn.space
    comps = [as_expr(c).compile(space) for c in f_full.components]

    def fn(points):
        sj = SodeJets(sode_tn, points)
        shape = (sj.batch,)
        F = [jets.as_jet(c(sj.x), space.dim, shape) for c in comps]
        zero = jets.constant(0.0, space.dim, shape)
        q = list(sj.q) + [zero] * (big_n - small_n)
        qd = list(sj.velocity) + [zero] * (big_n - small_n)
        mu = []
        for f in F:
            acc = None
            for i in range(small_n):
                term = f.partial(sode_tn.q_index(i)) * sj.velocity[i] + f.partial(sode_tn.v_index(i)) * sj.gamma[i]
                acc = term if acc is None else acc + term
            mu.append(acc)
        return q + qd + mu + F

    return ImmersionSample(space, 4 * big_n, T_STAR_TQ, fn, "Sigma_TN")


# -- Cartan 2-form ---------------------------------------------------------------


def _cartan_matrix(sj):
    """Antisymmetric W with Omega = sum_{a<b} W_ab dz^a ^ dz^b, entries are jets."""
    s = sj.sode
    n = s.n
    dim = s.space.dim
    zero = jets.constant(0.0, dim, (sj.batch,))
    W = [[zero for _ in range(dim)] for _ in range(dim)]

    def add(a, b, c):
        W[a][b] = W[a][b] + c
        W[b][a] = W[b][a] - c

    F = sj.F
    t = 0
    qi = [s.q_index(i) for i in range(n)]
    vi = [s.v_index(i) for i in range(n)]
    dFq = [[F[i].partial(qi[j]) for j in range(n)] for i in range(n)]
    dFv = [[F[i].partial(vi[j]) for j in range(n)] for i in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                add(qi[j], qi[i], -1.0 * dFq[i][j])
            add(vi[j], qi[i], -1.0 * dFv[i][j])
    for j in range(n):
        c = None
        for i in range(n):
            term = dFq[i][j] * sj.velocity[i] - dFq[j][i] * sj.velocity[i] - dFv[j][i] * sj.gamma[i]
            c = term if c is None else c + term
        add(qi[j], t, c)
        d = None
        for i in range(n):
            term = dFv[i][j] * sj.velocity[i]
            d = term if d is None else d + term
        add(vi[j], t, d)
    return W


def cartan_two_form_check(sode, fibermap, samples, tolerance=1e-10):
    """Check d(Omega) = 0 and i_Gamma Omega = 0 for Omega built from F."""
    _prepare(sode, fibermap, require_m0=True)
    sode, samples = _lift(sode, samples)
    n = sode.n
    dim = sode.space.dim

    def fn(batch):
        sj = SodeJets(sode, batch, fibermap)
        W = _cartan_matrix(sj)
        d_omega = np.zeros(sj.batch)
        for a in range(dim):
            for b in range(a + 1, dim):
                for c in range(b + 1, dim):
                    val = W[b][c].grad[..., a] + W[c][a].grad[..., b] + W[a][b].grad[..., c]
                    d_omega = np.maximum(d_omega, np.abs(val))
        X = [np.ones(sj.batch)] + [np.broadcast_to(v.value, (sj.batch,)) for v in sj.velocity]
        X += [np.broadcast_to(g.value, (sj.batch,)) for g in sj.gamma]
        contraction = np.zeros(sj.batch)
        for b in range(dim):
            val = sum(X[a] * W[a][b].value for a in range(dim))
            contraction = np.maximum(contraction, np.abs(val))
        g = _g(sj)
        return {"d_omega": d_omega, "contraction": contraction, "_rank": _rank_stats(g)}

    out, skipped, reasons, _ = sweep(samples, fn, sode.space.names)
    rep = _finish("CARTAN_TWO_FORM", tolerance, out, skipped, reasons, ["d_omega", "contraction"])
    ranks = out.get("_rank", np.array([]))
    rep.require("min_rank_g", float(ranks.min()) if ranks.size else 0.0, n, ">=")
    return rep


# -- Douglas fixture ---------------------------------------------------------------


_DOUGLAS_ROWS = (
    ("-2*x", "y - x", "2*y"),
    ("-2*xd", "2*(yd - xd)", "2*yd"),
    ("-2*x*y", "0", "2*x*y"),
)
DOUGLAS_SPACE = VarSpace(["x", "y", "xd", "yd"])


def douglas_case_iv_determinant(points):
    """Determinant of the 3x3 (A, B, C) classification matrix for f = xy."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mats = np.empty((len(points), 3, 3))
    for r, row in enumerate(_DOUGLAS_ROWS):
        for c, text in enumerate(row):
            mats[:, r, c] = as_expr(text).value(DOUGLAS_SPACE, points)
    return np.linalg.det(mats)


__all__ += ["DOUGLAS_SPACE"]
