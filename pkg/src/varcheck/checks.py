"""The check catalogue used by problem files and the command line.

Each check takes a :class:`CheckContext` and returns a list of
:class:`~varcheck.reports.ConditionReport`.  Options come from
``check.option = value`` entries in the ``[checks]`` section; their kinds
are declared in :data:`CHECKS` and validated when the problem is loaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import helmholtz as hz
from .bundles import FiberMap, OneForm, closedness_residual, isotropy_residual, sigma_immersion
from .errors import SemanticError, VarcheckError
from .extend import (
    closed_form_extension,
    flow_extension,
    image_deviation,
    path_integral,
    reconstruct_lagrangian,
    verify_extension,
    _lift_to_tq,
)
from .mech import (
    ConstrainedFlow,
    LagrangianDef,
    chaplygin_curvature_exprs,
    chaplygin_reduce,
    el_residual,
    el_sode,
    hamiltonization_residual,
    integrate,
    nonholonomic_sode,
    stencil_derivative,
    vakonomic_system,
)
from .reports import ConditionReport, Stat

__all__ = ["CHECKS", "CheckContext", "validate_options", "run_check"]


@dataclass
class CheckContext:
    problem: object
    tolerance: float
    trajectory_tolerance: float
    h: float
    samples: int
    seed: int
    extension: object = None
    trajectories: dict = field(default_factory=dict)

    def opt(self, check, key, kind, default=None):
        v = self.problem.option(check, key)
        if v is None:
            return default
        return _convert(v, kind, self.problem.params)

    def tol(self, check, default=None):
        return self.opt(check, "tol", "number", self.tolerance if default is None else default)

    def sode(self, check):
        if self.problem.sode is None:
            raise SemanticError(f"check {check!r} needs a [sode] section", section="checks")
        return self.problem.sode

    def lagrangian(self, check):
        if self.problem.lagrangian is None:
            raise SemanticError(f"check {check!r} needs 'L' in [lagrangian]", section="checks")
        return self.problem.lagrangian

    def fibermap(self, check, key="fibermap"):
        return self.problem.fibermap(self.opt(check, key, "name"))

    def samples_on(self, space, count=None):
        return self.problem.draw_samples(space, count or self.samples, self.seed)


def _convert(value, kind, params):
    if kind == "number":
        return value.number()
    if kind == "numbers":
        return value.numbers()
    if kind == "name":
        names = value.names()
        if len(names) != 1:
            raise SemanticError(f"expected a single name, got {value.text!r}", section="checks")
        return names[0]
    if kind == "names":
        return value.names()
    if kind == "expr":
        return value.expr(params)
    if kind == "exprs":
        return value.exprs(params)
    raise ValueError(kind)


# -- helpers -----------------------------------------------------------------


def _suite(fn, check):
    def run(ctx):
        sode = ctx.sode(check)
        F = ctx.fibermap(check)
        return [fn(sode, F, ctx.samples_on(sode.space), ctx.tol(check))]

    return run


# -- check implementations ---------------------------------------------------


def _isotropy(ctx):
    sode = ctx.sode("isotropy")
    F = ctx.fibermap("isotropy")
    imm = sigma_immersion(sode, F)
    pts = ctx.samples_on(sode.as_autonomous().space if sode.time_dependent else sode.space)
    return [isotropy_residual(imm, pts, ctx.tol("isotropy"))]


def _closedness(ctx):
    sode = ctx.sode("closedness")
    F = ctx.fibermap("closedness")
    rep = closedness_residual(OneForm.mu(sode, F), ctx.samples_on(sode.space), ctx.tol("closedness"))
    return [rep]


def _douglas(ctx):
    threshold = ctx.opt("douglas", "threshold", "number", 0.1)
    pts = ctx.samples_on(hz.DOUGLAS_SPACE)
    det = np.abs(hz.douglas_case_iv_determinant(pts))
    rep = ConditionReport("DOUGLAS_CASE_IV", 0.0)
    rep.samples_used = len(det)
    rep.require("min_abs_det", float(det.min()), threshold, ">")
    rep.extras["max_abs_det"] = float(det.max())
    rep.extras["nonvariational_case"] = "IV" if rep.passed else None
    return [rep]


def _singular_identity(ctx):
    """el_residual(L) = g (qdd - Gamma) at random states and accelerations."""
    lagr = ctx.lagrangian("singular_identity")
    sode = ctx.sode("singular_identity")
    if sode.m or sode.n != lagr.n:
        raise SemanticError("singular_identity needs an unconstrained system", section="checks")
    default_g = np.eye(lagr.n).tolist()
    g = np.asarray(ctx.opt("singular_identity", "g", "numbers", default_g), dtype=float)
    pts = ctx.samples_on(sode.space)
    rng = np.random.default_rng(ctx.seed + 1)
    qdd = rng.uniform(-1, 1, (len(pts), lagr.n))
    gamma = np.stack([e.value(sode.space, pts) for e in sode.gamma], -1)
    tq = pts
    lhs = el_residual(lagr, tq, qdd)
    rhs = np.einsum("ij,bj->bi", g, qdd - gamma)
    rep = ConditionReport("SINGULAR_LAGRANGIAN_IDENTITY", ctx.tol("singular_identity", 1e-12))
    rep.samples_used = len(pts)
    rep.equations["el_minus_g_times_defect"] = Stat.of(np.max(np.abs(lhs - rhs), axis=-1))
    W = lagr.parts(tq)["W"]
    rep.extras["velocity_hessian_rank"] = int(np.min(np.linalg.matrix_rank(W)))
    rep.extras["multiplier"] = g.tolist()
    return [rep]


def _nonholonomic(ctx):
    lagr = ctx.lagrangian("nonholonomic")
    sode = ctx.sode("nonholonomic")
    nh = nonholonomic_sode(lagr, ctx.problem.nh_constraints)
    pts = ctx.samples_on(sode.space)
    tq = _lift_to_tq(sode, pts)
    qdd, lam = nh.solve(tq)
    k = sode.n - sode.m
    gamma = np.stack([np.broadcast_to(e.value(sode.space, pts), (len(pts),)) for e in sode.gamma], -1)
    rep = ConditionReport("NONHOLONOMIC_DYNAMICS", ctx.tol("nonholonomic", 1e-12))
    rep.samples_used = len(pts)
    rep.equations["free_acceleration_deviation"] = Stat.of(np.max(np.abs(qdd[:, :k] - gamma), axis=-1))
    phi = np.stack([e.value(lagr.space, tq) for e in ctx.problem.nh_constraints], -1) if sode.m else np.zeros((len(pts), 1))
    rep.equations["constraint_residual_on_M"] = Stat.of(np.max(np.abs(phi), axis=-1))
    rep.extras["max_abs_multiplier"] = float(np.max(np.abs(lam))) if lam.size else 0.0
    return [rep]


def _reconstruct(ctx):
    sode = ctx.sode("reconstruct")
    F = ctx.fibermap("reconstruct")
    l = ctx.opt("reconstruct", "l", "expr", ctx.problem.constrained_lagrangian)
    if l is None:
        raise SemanticError("reconstruct needs 'l' in [lagrangian] or reconstruct.l", section="checks")
    pts = ctx.samples_on(sode.space)
    base = np.asarray(ctx.opt("reconstruct", "base", "numbers", pts[0].tolist()), dtype=float)
    form = OneForm.mu(sode, F)
    tol = ctx.tol("reconstruct", 1e-8)
    vals = reconstruct_lagrangian(form, base, pts, check_samples=pts, tolerance=max(tol, ctx.tolerance))
    ref = l.value(sode.space, pts) - float(l.value(sode.space, base[None, :])[0])
    rep = ConditionReport("RECONSTRUCTION", tol)
    rep.samples_used = len(pts)
    rep.equations["deviation_up_to_constant"] = Stat.of(np.abs(vals - ref))
    # path independence: direct segment versus a detour through another sample
    k = min(8, len(pts) - 1)
    detours = [abs(path_integral(form, [base, pts[i + 1], pts[i]]) - path_integral(form, [base, pts[i]])) for i in range(k)]
    rep.equations["path_dependence"] = Stat.of(detours)
    rep.extras["base_point"] = base.tolist()
    return [rep]


def _extend_flow(ctx):
    c = "extend_flow"
    sode = ctx.sode(c)
    F = ctx.fibermap(c)
    constraints = ctx.opt(c, "constraints", "exprs")
    if not constraints:
        raise SemanticError("extend_flow needs extend_flow.constraints", section="checks")
    box = ctx.opt(c, "flow_box", "numbers", [[-0.5, 0.5]] * len(constraints))
    h = ctx.opt(c, "h", "number", 1e-2)
    count = int(ctx.opt(c, "samples", "number", ctx.samples))
    pts = ctx.samples_on(sode.space, count)
    res = flow_extension(
        sigma_immersion(sode, F), constraints, sode.coords, box, pts, h=h, tolerance=ctx.tol(c), seed=ctx.seed
    )
    reports = list(res.reports.values())
    reg = ConditionReport("REGULARITY", 0.0)
    reg.samples_used = res.regularity.get("samples", 0)
    reg.extras.update(res.regularity)
    reg.extras["informational"] = True
    L_bar = ctx.opt(c, "L_bar", "expr", ctx.problem.extension_lagrangian)
    if L_bar is not None and res.reports["graph"].passed:
        img = image_deviation(res, L_bar)
        img.tolerance = ctx.opt(c, "image_tol", "number", 1e-6)
        reports.append(img)
        if img.passed:
            res.matched_lagrangian = LagrangianDef(L_bar, sode.coords, time_dependent=False)
    ctx.extension = res
    return reports, [reg]


def _extend_closed(ctx):
    c = "extend_closed"
    sode = ctx.sode(c)
    F = ctx.fibermap(c)
    pts = ctx.samples_on(sode.space)
    base = ctx.opt(c, "base", "numbers", pts[0].tolist())
    l = ctx.opt(c, "l", "expr", ctx.problem.constrained_lagrangian)
    res = closed_form_extension(sode, F, base, pts, ctx.tol(c), l_expr=l)
    reports = list(res.reports.values())
    tq = _lift_to_tq(sode, pts)
    # dL restricted to M reproduces the section: compare on M
    form = OneForm.mu(sode, F)
    n, k = sode.n, sode.n - sode.m
    d = res.differential(tq)
    # pull back dL to M: d/dx^i + d/dy^a * dpsi^a/dx^i
    psi_grad = np.stack([OneForm.exact(sode.space, p).values(pts) for p in sode.psi], 1) if sode.m else np.zeros((len(pts), 0, n + k))
    pulled = d[:, : n + k] + np.einsum("ba,bai->bi", d[:, n + k :], psi_grad)
    rep = ConditionReport("RESTRICTION_TO_M", ctx.tol(c))
    rep.samples_used = len(pts)
    rep.equations["pullback_minus_section"] = Stat.of(np.max(np.abs(pulled - form.values(pts)), axis=-1))
    normal = np.stack([e.value(sode.space, pts) for e in F.components[k:]], -1) if sode.m else np.zeros((len(pts), 0))
    rep.equations["normal_components_minus_F"] = Stat.of(
        np.max(np.abs(d[:, n + k :] - normal), axis=-1) if sode.m else np.zeros(len(pts))
    )
    reports.append(rep)
    reg = ConditionReport("REGULARITY", 0.0)
    reg.samples_used = res.regularity.get("samples", 0)
    reg.extras.update(res.regularity)
    reg.extras["informational"] = True
    if res.L_bar is not None:
        reg.extras["L_bar"] = res.L_bar.pretty()
    ctx.extension = res
    return reports, [reg]


def _verify_extension(ctx):
    c = "verify_extension"
    sode = ctx.sode(c)
    res = ctx.extension
    L_bar = ctx.opt(c, "L_bar", "expr")
    if L_bar is not None:
        from .extend import _symbolic_result

        res = _symbolic_result(LagrangianDef(L_bar, sode.coords, time_dependent=False), "GIVEN")
    elif res is None:
        raise SemanticError("verify_extension needs a preceding extension check or verify_extension.L_bar", section="checks")
    elif res.lagrangian is None and getattr(res, "matched_lagrangian", None) is not None:
        from .extend import _symbolic_result

        res = _symbolic_result(res.matched_lagrangian, res.construction)
    x0 = ctx.opt(c, "x0", "numbers")
    if x0 is None:
        raise SemanticError("verify_extension needs verify_extension.x0", section="checks")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t_final = ctx.opt(c, "t_final", "number", 1.0)
    h = ctx.opt(c, "h", "number", ctx.h)
    runs = {}
    rep = verify_extension(res, sode, x0, t_final, h, ctx.tol(c, ctx.trajectory_tolerance), trajectories=runs)
    for key, traj in runs.items():
        ctx.trajectories[f"verify_extension_{key}"] = traj
    return [rep]


def _vakonomic(ctx):
    c = "vakonomic"
    lagr = ctx.lagrangian(c)
    cons = ctx.problem.nh_constraints
    vk = vakonomic_system(lagr, cons)
    x0 = np.asarray(ctx.opt(c, "x0", "numbers"), dtype=float)
    n, m = lagr.n, len(cons)
    if x0.shape != (2 * n + m,):
        raise SemanticError(f"vakonomic.x0 needs {2 * n + m} entries (q, qd, multipliers)", section="checks")
    t_final = ctx.opt(c, "t_final", "number", 1.0)
    h = ctx.opt(c, "h", "number", ctx.h)
    traj = integrate(vk, x0, t_final, h)
    ctx.trajectories["vakonomic"] = traj
    rep = ConditionReport("VAKONOMIC", ctx.tol(c, 1e-7))
    res = vk.trajectory_residual(traj)
    rep.samples_used = int(np.sum(np.isfinite(res)))
    rep.equations["vakonomic_residual"] = Stat.of(res[np.isfinite(res)])
    nh = nonholonomic_sode(lagr, cons)
    acc = stencil_derivative(traj.times, traj.qd)
    inner = slice(2, len(traj) - 2)
    pts = lagr.point(traj.times[inner, None], traj.q[inner], traj.qd[inner])
    nh_res = np.max(np.abs(acc[inner] - nh.accelerations(pts)), axis=-1)
    rep.extras["nonholonomic_residual_max"] = float(nh_res.max())
    nh_traj = integrate(nh, x0[: 2 * n], t_final, h)
    L = min(len(nh_traj), len(traj))
    dev = np.max(np.abs(nh_traj.q[:L] - traj.q[:L]), axis=-1)
    rep.extras["state_deviation_from_nonholonomic"] = float(dev.max())
    expect = ctx.opt(c, "expect", "name")
    if expect == "differs":
        rep.require("nonholonomic_residual_max", float(nh_res.max()), ctx.opt(c, "differ_threshold", "number", 1e-2), ">")
    elif expect == "coincides":
        rep.equations["state_deviation_from_nonholonomic"] = Stat.of(dev)
    rep.extras["truncated"] = traj.truncated
    return [rep]


def _chaplygin(ctx):
    c = "chaplygin"
    d = ctx.problem.chaplygin
    if d is None:
        raise SemanticError("check 'chaplygin' needs a [chaplygin] section", section="checks")
    red = chaplygin_reduce(d)
    pts = ctx.samples_on(red.space)
    rep = ConditionReport("CHAPLYGIN", ctx.tol(c, 1e-8))
    rep.samples_used = len(pts)
    curv = chaplygin_curvature_exprs(d)
    rep.extras["curvature"] = [[[e.pretty() for e in row] for row in mat] for mat in curv]
    force = red.force(pts)
    rep.extras["max_abs_lambda"] = float(np.max(np.abs(force)))
    if ctx.opt(c, "expect_zero_force", "number", 0):
        rep.equations["lambda_force"] = Stat.of(np.max(np.abs(force), axis=-1))
    rep.extras["reduced_lagrangian"] = red.lagr.L.pretty()
    x0 = ctx.opt(c, "x0", "numbers")
    if x0 is not None and ctx.problem.lagrangian is not None and ctx.problem.sode is not None:
        sode = ctx.problem.sode
        t_final = ctx.opt(c, "t_final", "number", 1.0)
        h = ctx.opt(c, "h", "number", ctx.h)
        x0 = np.asarray(x0, dtype=float)
        nb = d.base_dim
        if tuple(sode.free) != d.base_coords:
            raise SemanticError("chaplygin.x0 needs the base coordinates as the free coordinates", section="checks")
        reduced = integrate(red, np.concatenate([x0[:nb], x0[sode.n :]]), t_final, h)
        full = integrate(nonholonomic_sode(ctx.problem.lagrangian, ctx.problem.nh_constraints), _lift_to_tq(sode, x0[None, :])[0], t_final, h)
        idx = [sode.coords.index(r) for r in d.base_coords]
        L = min(len(reduced), len(full))
        dev = np.max(np.abs(np.concatenate([reduced.q[:L] - full.q[:L, idx], reduced.qd[:L] - full.qd[:L, idx]], -1)), axis=-1)
        rep.equations["reduced_vs_full_marginals"] = Stat.of(dev)
        ctx.trajectories["chaplygin_reduced"] = reduced
    return [rep]


def _hamiltonization(ctx):
    c = "hamiltonization"
    d = ctx.problem.chaplygin
    if d is None:
        raise SemanticError("check 'hamiltonization' needs a [chaplygin] section", section="checks")
    red = chaplygin_reduce(d)
    comps = ctx.opt(c, "F", "exprs")
    F = red.lagr.legendre() if comps is None else FiberMap(comps, "F")
    pts = ctx.samples_on(red.space)
    return [hamiltonization_residual(red, F, pts, ctx.tol(c))]


def _holonomic(ctx):
    c = "holonomic"
    sode = ctx.sode(c)
    amb = ctx.problem.ambient
    if not amb:
        raise SemanticError("holonomic needs 'ambient' coordinates in [space]", section="space")
    names = ctx.opt(c, "fibermaps", "names") or [ctx.opt(c, "fibermap", "name") or next(iter(ctx.problem.fibermaps))]
    pts = ctx.samples_on(sode.space)
    out = []
    for name in names:
        rep = hz.holonomic_check(sode, len(amb), sode.n, ctx.problem.fibermap(name), pts, ctx.tol(c), ambient=amb)
        rep.extras["fibermap"] = name
        out.append(rep)
    return out


def _verify_holonomic(ctx):
    c = "verify_holonomic"
    sode = ctx.sode(c)
    lagr = ctx.lagrangian(c)
    amb = ctx.problem.ambient
    small = sode.n
    x0 = np.atleast_2d(np.asarray(ctx.opt(c, "x0", "numbers"), dtype=float))
    t_final = ctx.opt(c, "t_final", "number", 1.0)
    h = ctx.opt(c, "h", "number", ctx.h)
    rep = ConditionReport("HOLONOMIC_EXTENSION", ctx.tol(c, ctx.trajectory_tolerance))
    devs, normals = [], []
    for st in x0:
        q, v = st[:small], st[small:]
        big = len(amb)
        full0 = np.concatenate([q, np.zeros(big - small), v, np.zeros(big - small)])
        ext = integrate(el_sode(lagr), full0, t_final, h)
        ref = integrate(ConstrainedFlow(sode), st, t_final, h)
        L = min(len(ext), len(ref))
        devs.append(np.max(np.abs(np.concatenate([ext.q[:L, :small] - ref.q[:L], ext.qd[:L, :small] - ref.qd[:L]], -1)), axis=-1))
        normals.append(np.max(np.abs(np.concatenate([ext.q[:, small:], ext.qd[:, small:]], -1)), axis=-1))
    rep.samples_used = len(x0)
    rep.equations["intrinsic_deviation"] = Stat.of(np.concatenate(devs))
    rep.equations["normal_drift"] = Stat.of(np.concatenate(normals))
    return [rep]


_FIB = {"fibermap": "name", "tol": "number"}

CHECKS = {
    "helmholtz": (_suite(hz.helmholtz_classic, "helmholtz"), _FIB),
    "l_conditions": (_suite(hz.l_conditions, "l_conditions"), _FIB),
    "t_conditions": (_suite(hz.t_conditions, "t_conditions"), _FIB),
    "cartan": (_suite(hz.cartan_two_form_check, "cartan"), _FIB),
    "ch": (_suite(hz.ch_conditions, "ch"), _FIB),
    "tc": (_suite(hz.tc_conditions, "tc"), _FIB),
    "isotropy": (_isotropy, _FIB),
    "closedness": (_closedness, _FIB),
    "douglas": (_douglas, {"threshold": "number"}),
    "singular_identity": (_singular_identity, {"g": "numbers", "tol": "number"}),
    "nonholonomic": (_nonholonomic, {"tol": "number"}),
    "reconstruct": (_reconstruct, {"fibermap": "name", "base": "numbers", "l": "expr", "tol": "number"}),
    "extend_flow": (
        _extend_flow,
        {
            "fibermap": "name",
            "constraints": "exprs",
            "flow_box": "numbers",
            "h": "number",
            "samples": "number",
            "L_bar": "expr",
            "image_tol": "number",
            "tol": "number",
        },
    ),
    "extend_closed": (_extend_closed, {"fibermap": "name", "base": "numbers", "l": "expr", "tol": "number"}),
    "verify_extension": (
        _verify_extension,
        {"x0": "numbers", "t_final": "number", "h": "number", "L_bar": "expr", "tol": "number"},
    ),
    "vakonomic": (
        _vakonomic,
        {"x0": "numbers", "t_final": "number", "h": "number", "expect": "name", "differ_threshold": "number", "tol": "number"},
    ),
    "chaplygin": (
        _chaplygin,
        {"x0": "numbers", "t_final": "number", "h": "number", "expect_zero_force": "number", "tol": "number"},
    ),
    "hamiltonization": (_hamiltonization, {"F": "exprs", "tol": "number"}),
    "holonomic": (_holonomic, {"fibermap": "name", "fibermaps": "names", "tol": "number"}),
    "verify_holonomic": (_verify_holonomic, {"x0": "numbers", "t_final": "number", "h": "number", "tol": "number"}),
}


def validate_options(problem):
    for check, opts in problem.options.items():
        schema = CHECKS[check][1]
        for key, value in opts.items():
            if key not in schema:
                raise SemanticError(
                    f"unknown option {check}.{key} (options: {', '.join(sorted(schema))})", section="checks", name=key
                )
            _convert(value, schema[key], problem.params)
    for check in problem.checks:
        for key, kind in CHECKS[check][1].items():
            if kind == "name" and key == "fibermap" and problem.option(check, key) is not None:
                problem.fibermap(problem.option(check, key).names()[0])


def run_check(name, ctx):
    """Run one check; returns ``(reports, informational_reports, error)``.

    Library errors are captured as a failed check with the message, so a
    run never aborts on one bad check.
    """
    fn = CHECKS[name][0]
    try:
        out = fn(ctx)
    except VarcheckError as exc:
        return [], [], f"{type(exc).__name__}: {exc}"
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return [], [], f"{type(exc).__name__}: {exc}"
    if isinstance(out, tuple):
        return out[0], out[1], None
    return out, [], None
