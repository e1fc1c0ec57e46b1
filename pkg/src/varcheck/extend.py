"""Constructing Lagrangians from variational data.

* :func:`reconstruct_lagrangian` integrates a closed 1-form along straight
  segments (composite Gauss-Legendre quadrature).
* :func:`closed_form_extension` builds ``L(x, y) = gt_a(x) y^a + f(x)`` in
  coordinates adapted to the constraint submanifold.
* :func:`flow_extension` transports an isotropic submanifold of ``T*TQ``
  along Hamiltonian flows of user-chosen constraint functions and exposes
  the result as a numerical Lagrangian (differential, Hessian, value).
* :func:`verify_extension` compares Euler-Lagrange motion of an extension
  with the constrained dynamics.

Phase-space variables of ``T*TQ`` are named ``q``, ``qd``, ``mu_q`` and
``mut_q`` for every configuration coordinate ``q``; the symplectic form is
``dq ^ dmu_q + dqd ^ dmut_q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jets
from .bundles import (
    T_STAR_TQ,
    ImmersionSample,
    OneForm,
    Sode,
    closedness_residual,
    isotropy_residual,
    numerical_rank,
    velocity_name,
)
from .errors import (
    ClosednessError,
    InputError,
    IsotropyError,
    PreconditionError,
    ProjectionError,
    SemanticError,
    SingularHessian,
    TransversalityError,
)
from .expr import as_expr
from .jets import VarSpace
from .mech import ConstrainedFlow, LagrangianDef, el_sode, integrate, stencil_derivative
from .reports import ConditionReport, Stat

__all__ = [
    "CLOSED_FORM",
    "FLOW",
    "ReconstructedScalar",
    "ExtensionResult",
    "FlowExtension",
    "gauss_legendre_rule",
    "reconstruct_lagrangian",
    "path_integral",
    "closed_form_extension",
    "closed_form_extension_adapted",
    "hamiltonian_vector_field",
    "phase_space",
    "momentum_name",
    "flow_extension",
    "image_deviation",
    "verify_extension",
]

CLOSED_FORM = "CLOSED_FORM"
FLOW = "FLOW"


def momentum_name(q, tilde=False):
    return ("mut_" if tilde else "mu_") + q


def phase_space(coords):
    """Chart ``(q, qd, mu, mut)`` of ``T*TQ``."""
    coords = list(coords)
    return VarSpace(
        coords
        + [velocity_name(q) for q in coords]
        + [momentum_name(q) for q in coords]
        + [momentum_name(q, True) for q in coords]
    )


# -- path integrals ----------------------------------------------------------


def gauss_legendre_rule(panels=4, nodes=8):
    """Composite Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, 1.0, panels + 1)
    s, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        s.append(a + (b - a) * (x + 1) / 2)
        ws.append(w * (b - a) / 2)
    return np.concatenate(s), np.concatenate(ws)


def _form_values(form, points):
    if isinstance(form, OneForm):
        return form.values(points)
    out = form(points)
    comps = getattr(out, "comps", out)
    return np.atleast_2d(np.asarray(comps, dtype=float))


def _form_coords(form, dim):
    return list(form.coords) if isinstance(form, OneForm) else list(range(dim))


def _segment_integrals(form, starts, ends):
    """Integral of the form along straight segments, one per row."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    starts, ends = np.broadcast_arrays(starts, ends)
    dim = starts.shape[-1]
    coords = _form_coords(form, dim)
    delta = ends - starts
    others = [k for k in range(dim) if k not in coords]
    if others and np.any(delta[:, others] != 0):
        raise InputError("the path moves along coordinates the 1-form does not cover")
    s, w = gauss_legendre_rule()
    pts = starts[:, None, :] + s[None, :, None] * delta[:, None, :]
    vals = _form_values(form, pts.reshape(-1, dim)).reshape(len(starts), len(s), len(coords))
    integrand = np.einsum("bsk,bk->bs", vals, delta[:, coords])
    return integrand @ w, pts.reshape(-1, dim)


def _require_closed(form, samples, tolerance):
    if not isinstance(form, OneForm):
        return None
    rep = closedness_residual(form, samples, tolerance)
    if rep.samples_used == 0 or rep.max_residual() > tolerance:
        raise ClosednessError(
            f"the 1-form is not closed on the integration region "
            f"(max antisymmetric derivative {rep.max_residual():.3e} > {tolerance:.1e}); refusing to integrate"
        )
    return rep


def reconstruct_lagrangian(form, base_point, query_points, check_samples=None, tolerance=1e-8):
    """``L(query) = integral of the form from base_point to query`` along straight lines.

    ``form`` is a :class:`~varcheck.bundles.OneForm` (closedness is checked
    first, at ``check_samples`` or else at the quadrature nodes) or a
    callable returning covector components.  ``L(base_point) = 0``.
    """
    base = np.asarray(base_point, dtype=float)
    query = np.atleast_2d(np.asarray(query_points, dtype=float))
    values, nodes = _segment_integrals(form, base[None, :], query)
    _require_closed(form, nodes if check_samples is None else check_samples, tolerance)
    return values


def path_integral(form, vertices):
    """Integral of the form along a polyline through ``vertices``."""
    v = np.asarray(vertices, dtype=float)
    vals, _ = _segment_integrals(form, v[:-1], v[1:])
    return float(math.fsum(vals))


class ReconstructedScalar:
    """A function known through its differential, normalized to 0 at ``base_point``."""

    def __init__(self, form, base_point, tolerance=1e-8, check_samples=None):
        self.form = form
        self.base_point = np.asarray(base_point, dtype=float)
        self.tolerance = tolerance
        if check_samples is not None:
            _require_closed(form, check_samples, tolerance)

    def __call__(self, points):
        vals, _ = _segment_integrals(self.form, self.base_point[None, :], np.atleast_2d(points))
        return vals

    def gradient(self, points):
        return _form_values(self.form, np.atleast_2d(points))


# -- extension results -------------------------------------------------------


@dataclass
class ExtensionResult:
    """An extension ``Lbar`` on the full ``TQ`` chart ``(q, qd)``.

    ``lagrangian`` is set when a symbolic expression is available; the
    numerical evaluators always are.
    """

    construction: str
    coords: tuple
    differential_fn: object
    hessian_fn: object
    value_fn: object
    lagrangian: LagrangianDef | None = None
    reports: dict = field(default_factory=dict)
    regularity: dict = field(default_factory=dict)
    flow: FlowExtension | None = None

    @property
    def L_bar(self):
        return None if self.lagrangian is None else self.lagrangian.L

    @property
    def n(self):
        return len(self.coords)

    def differential(self, points):
        """``(dL/dq, dL/dqd)`` at TQ points, shape (batch, 2n)."""
        return self.differential_fn(np.atleast_2d(np.asarray(points, dtype=float)))

    def hessian(self, points):
        return self.hessian_fn(np.atleast_2d(np.asarray(points, dtype=float)))

    def value(self, points):
        return self.value_fn(np.atleast_2d(np.asarray(points, dtype=float)))

    def velocity_hessian(self, points):
        n = self.n
        return self.hessian(points)[:, n:, n:]

    @property
    def passed(self):
        return all(r.passed for r in self.reports.values())

    def to_dict(self):
        return {
            "construction": self.construction,
            "coords": list(self.coords),
            "L_bar": None if self.L_bar is None else self.L_bar.pretty(),
            "pass": self.passed,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "regularity": dict(self.regularity),
        }


def _regularity(result, points):
    W = result.velocity_hessian(points)
    det = np.abs(np.linalg.det(W))
    scale = np.maximum(1.0, np.max(np.abs(W), axis=(-2, -1))) ** W.shape[-1]
    singular = det < 1e-12 * scale
    return {
        "min_abs_det_velocity_hessian": float(det.min()),
        "max_abs_det_velocity_hessian": float(det.max()),
        "samples": int(len(det)),
        "singular_samples": int(singular.sum()),
        "regular": bool(not singular.any()),
    }


def _symbolic_result(lagr, construction, reports=None, base=None):
    space = lagr.space

    def differential(points):
        j = lagr.jet(points)
        return j.grad[:, -2 * lagr.n :]

    def hessian(points):
        j = lagr.jet(points)
        k = 2 * lagr.n
        return j.hess[:, -k:, -k:]

    def value(points):
        v = lagr.L.value(space, points)
        if base is not None:
            v = v - float(lagr.L.value(space, np.asarray(base)[None, :])[0])
        return v

    return ExtensionResult(construction, lagr.coords, differential, hessian, value, lagr, reports or {})


# -- closed-form extension ---------------------------------------------------


def closed_form_extension_adapted(x_names, y_names, gamma, gamma_normal, base_point, samples, tolerance=1e-9, f_expr=None):
    """``L(x, y) = gamma_normal_a(x) y^a + f(x)`` with ``df = gamma_i dx^i`` on ``C = {y = 0}``.

    ``gamma`` and ``gamma_normal`` are expressions in ``x``.  The isotropy of
    ``gamma(C)`` (symmetry of ``d gamma_i / d x^j``) is checked at
    ``samples`` first.  ``f`` is reconstructed by path integration unless
    ``f_expr`` is supplied, in which case ``df = gamma`` is verified and the
    result is symbolic.
    """
    xs = VarSpace(x_names)
    gamma = [as_expr(g) for g in gamma]
    gamma_normal = [as_expr(g) for g in gamma_normal]
    if len(gamma) != len(x_names) or len(gamma_normal) != len(y_names):
        raise SemanticError("section components do not match the adapted dimensions", section="extend")
    form = OneForm.from_exprs(xs, gamma, name="gamma")
    rep = closedness_residual(form, samples, tolerance)
    rep.family = "ISOTROPY_OF_SECTION"
    if rep.samples_used == 0 or rep.max_residual() > tolerance:
        raise IsotropyError(f"gamma(C) is not isotropic: residual {rep.max_residual():.3e} > {tolerance:.1e}")
    reports = {"isotropy": rep}
    full = VarSpace(list(x_names) + list(y_names))
    if f_expr is not None:
        f_expr = as_expr(f_expr)
        fcheck = ConditionReport("BASE_FUNCTION", tolerance)
        diffs = []
        df = OneForm.exact(xs, f_expr)
        diffs = np.abs(df.values(samples) - form.values(samples)).max(axis=-1)
        fcheck.samples_used = len(diffs)
        fcheck.equations["df_minus_gamma"] = Stat.of(diffs)
        reports["base_function"] = fcheck
        L = f_expr
        for g, y in zip(gamma_normal, y_names):
            L = L + g * as_expr(y)
        return L, reports, None
    scalar = ReconstructedScalar(form, base_point)
    normal_fns = [g.compile(xs) for g in gamma_normal]
    nx = len(x_names)

    def value(points):
        points = np.atleast_2d(points)
        x, y = points[:, :nx], points[:, nx:]
        cols = [x[:, i] for i in range(nx)]
        normal = np.stack([np.broadcast_to(np.asarray(fn(cols), dtype=float), (len(x),)) for fn in normal_fns], -1)
        return scalar(x) + np.einsum("ba,ba->b", normal, y)

    return value, reports, full


def _lift_to_tq(sode, points):
    """TQ points (q, qd) from M-chart points (q, v)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    psi = [e.compile(sode.space) for e in sode.psi]
    cols = [pts[:, i] for i in range(pts.shape[1])]
    extra = [np.broadcast_to(np.asarray(f(cols), dtype=float), (len(pts),)) for f in psi]
    return np.concatenate([pts] + ([np.stack(extra, -1)] if extra else []), axis=-1)


def closed_form_extension(sode, fibermap, base_point, samples, tolerance=1e-9, l_expr=None):
    """Closed-form extension of a variational constrained SODE to ``TQ``.

    The adapted normal coordinates are ``y^a = qd_c - psi^a``; the section
    is the Lie-derivative form on ``M`` together with the constrained
    momentum components of ``F``.  With ``l_expr`` (a Lagrangian on ``M``)
    the result is the symbolic ``Lbar = l + F_c (qd_c - psi)``.
    """
    if sode.time_dependent:
        raise SemanticError("closed-form extension is implemented for autonomous systems", section="extend")
    fibermap.check(sode)
    n, m = sode.n, sode.m
    M = sode.space
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    form = OneForm.mu(sode, fibermap)
    rep = closedness_residual(form, samples, tolerance)
    rep.family = "ISOTROPY_OF_SECTION"
    if rep.samples_used == 0 or rep.max_residual() > tolerance:
        raise IsotropyError(f"Sigma is not isotropic: residual {rep.max_residual():.3e} > {tolerance:.1e}")
    reports = {"isotropy": rep}
    normal = fibermap.components[n - m :]
    coords = sode.coords
    lagr = None
    if l_expr is not None:
        l_expr = as_expr(l_expr)
        df = OneForm.exact(M, l_expr)
        dev = np.abs(df.values(samples) - form.values(samples)).max(axis=-1)
        fcheck = ConditionReport("BASE_FUNCTION", tolerance)
        fcheck.samples_used = len(dev)
        fcheck.equations["dl_minus_section"] = Stat.of(dev)
        reports["base_function"] = fcheck
        L = l_expr
        for g, q, psi in zip(normal, sode.constrained, sode.psi):
            L = L + g * (as_expr(velocity_name(q)) - psi)
        lagr = LagrangianDef(L.simplified(), coords, time_dependent=False)
        base_tq = _lift_to_tq(sode, np.asarray(base_point)[None, :])[0]
        result = _symbolic_result(lagr, CLOSED_FORM, reports, base=base_tq)
        result.regularity = _regularity(result, _lift_to_tq(sode, samples))
        return result

    scalar = ReconstructedScalar(form, base_point)
    k = n - m
    psi_jet_fns = [e.compile(M) for e in sode.psi]
    normal_fns = [e.compile(M) for e in normal]

    def _pieces(points):
        points = np.atleast_2d(points)
        mpts = points[:, : n + k]
        y = points[:, n + k :] - _lift_to_tq(sode, mpts)[:, n + k :]
        return mpts, y

    def value(points):
        mpts, y = _pieces(points)
        cols = [mpts[:, i] for i in range(mpts.shape[1])]
        g = np.stack([np.broadcast_to(np.asarray(f(cols), dtype=float), (len(mpts),)) for f in normal_fns], -1)
        return scalar(mpts) + np.einsum("ba,ba->b", g, y)

    def _jets(points):
        mpts, y = _pieces(points)
        x = jets.seed(M, mpts)
        B = len(mpts)
        g = [jets.as_jet(f(x), M.dim, (B,)) for f in normal_fns]
        psi = [jets.as_jet(f(x), M.dim, (B,)) for f in psi_jet_fns]
        return mpts, y, g, psi

    def differential(points):
        # dL = gamma (pulled along y = 0) + y^a d(g_a) + g_a dy^a, with dy^a = dqd_c - dpsi^a
        mpts, y, g, psi = _jets(points)
        base_form = _form_values(form, mpts)  # components over (q, v)
        out = np.zeros((len(mpts), 2 * n))
        out[:, : n + k] = base_form
        for a in range(m):
            out[:, : n + k] += y[:, a, None] * g[a].grad - g[a].value[:, None] * psi[a].grad
            out[:, n + k + a] += g[a].value
        return out

    def hessian(points):
        # finite differences of the exact differential; used only for regularity reports
        points = np.atleast_2d(points)
        h = 1e-5
        H = np.zeros((len(points), 2 * n, 2 * n))
        for j in range(2 * n):
            e = np.zeros(2 * n)
            e[j] = h
            H[:, :, j] = (differential(points + e) - differential(points - e)) / (2 * h)
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    result = ExtensionResult(CLOSED_FORM, coords, differential, hessian, value, None, reports)
    result.regularity = _regularity(result, _lift_to_tq(sode, samples))
    return result


# -- flow extension ----------------------------------------------------------


def hamiltonian_vector_field(phi, coords):
    """Components of ``X_phi`` on ``T*TQ`` with ``i_X omega = d phi``.

    Ordered like :func:`phase_space`: ``(dphi/dmu, dphi/dmut, -dphi/dq, -dphi/dqd)``.
    """
    phi = as_expr(phi)
    names = phase_space(coords).names
    n = len(coords)
    q, qd, mu, mut = names[:n], names[n : 2 * n], names[2 * n : 3 * n], names[3 * n :]
    return [phi.diff(v) for v in mu] + [phi.diff(v) for v in mut] + [-phi.diff(v) for v in q] + [
        -phi.diff(v) for v in qd
    ]


def _pad(jet, dim, offset=0):
    """Re-embed a first-order jet in a larger variable set."""
    B = np.shape(jet.value)
    g = np.zeros(B + (dim,))
    g[..., offset : offset + jet.grad.shape[-1]] = jet.grad
    return jets.Jet2(jet.value, g, None)


class FlowExtension:
    """Transport of a parametrized isotropic submanifold along Hamiltonian flows.

    A node is ``Z(p, s) = exp(s_k X_k) o ... o exp(s_1 X_1) (sigma(p))``; each
    flow is integrated with classical RK4 on ``tau in [0, 1]`` for the
    rescaled field ``s X``, with ``ceil(max|s| / h)`` steps, carrying
    first-order jets in ``(p, s)``.
    """

    def __init__(self, sigma, constraints, coords, flow_box, h=1e-2):
        self.sigma = sigma
        self.coords = tuple(coords)
        n = len(self.coords)
        if sigma.target_dim != 4 * n or sigma.chart != T_STAR_TQ:
            raise SemanticError("sigma must be a submanifold of the T*TQ chart", section="extend")
        self.space = phase_space(self.coords)
        self.constraints = [as_expr(c) for c in constraints]
        for c in self.constraints:
            for v in sorted(c.free_vars):
                if v not in self.space:
                    raise SemanticError(f"undeclared phase-space variable {v!r}", section="extend", name=v)
        self.fields = [hamiltonian_vector_field(c, self.coords) for c in self.constraints]
        self._field_fns = [[e.compile(self.space) for e in f] for f in self.fields]
        self.flow_box = np.asarray(flow_box, dtype=float).reshape(len(self.constraints), 2)
        self.h = float(h)
        self.param_dim = sigma.params.dim
        self.flow_names = tuple(f"s{k + 1}" for k in range(len(self.constraints)))
        self.params = VarSpace(list(sigma.params.names) + list(self.flow_names))
        tq = self.space.names[: 2 * n]
        self._guess_idx = [tq.index(p) if p in tq else None for p in sigma.params.names]

    @property
    def k(self):
        return len(self.constraints)

    @property
    def dim(self):
        return self.param_dim + self.k

    def _field(self, k, z):
        B = np.shape(z[0].value)
        return [jets.as_jet(f(z), self.dim, B) for f in self._field_fns[k]]

    def transport(self, points):
        """First-order jets of the ``4n`` coordinates of ``Z`` at ``(p, s)`` points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        D, dim = self.param_dim, self.dim
        p, s = points[:, :D], points[:, D:]
        z = [_pad(c, dim) for c in self.sigma.map_fn(p)]
        for k in range(self.k):
            sk = jets.Jet2(s[:, k], np.zeros((len(points), dim)), None)
            sk.grad[:, D + k] = 1.0
            # at least one step, so that s = 0 still carries dZ/ds = X
            steps = max(1, int(math.ceil(np.max(np.abs(s[:, k])) / self.h - 1e-12)))
            dt = 1.0 / steps
            for _ in range(steps):
                k1 = [f * sk for f in self._field(k, z)]
                k2 = [f * sk for f in self._field(k, [a + b * (dt / 2) for a, b in zip(z, k1)])]
                k3 = [f * sk for f in self._field(k, [a + b * (dt / 2) for a, b in zip(z, k2)])]
                k4 = [f * sk for f in self._field(k, [a + b * dt for a, b in zip(z, k3)])]
                z = [a + (b1 + b2 * 2 + b3 * 2 + b4) * (dt / 6) for a, b1, b2, b3, b4 in zip(z, k1, k2, k3, k4)]
        return z

    def nodes(self, points):
        comps = self.transport(points)
        return np.stack([np.broadcast_to(c.value, (len(np.atleast_2d(points)),)) for c in comps], -1)

    def jacobian(self, points):
        return np.stack([c.grad for c in self.transport(points)], axis=-2)

    def immersion(self):
        return ImmersionSample(self.params, self.sigma.target_dim, T_STAR_TQ, self.transport, "extended")

    def constraint_values(self, points):
        vals = self.nodes(points)
        return np.stack([c.value(self.space, vals) for c in self.constraints], -1)

    def _initial_guess(self, tq):
        B = len(tq)
        guess = np.zeros((B, self.dim))
        for j, idx in enumerate(self._guess_idx):
            if idx is not None:
                guess[:, j] = tq[:, idx]
        return guess

    def invert(self, tq_points, tol=1e-12, max_iter=40):
        """Solve ``pi(Z(p, s)) = x`` by Newton's method; returns ``(params, jets)``."""
        tq = np.atleast_2d(np.asarray(tq_points, dtype=float))
        n2 = 2 * len(self.coords)
        if self.dim != n2:
            raise ProjectionError(
                f"the extension has dimension {self.dim}, a graph over TQ needs {n2}"
            )
        y = self._initial_guess(tq)
        for _ in range(max_iter):
            comps = self.transport(y)
            val = np.stack([c.value for c in comps[:n2]], -1)
            Jx = np.stack([c.grad for c in comps[:n2]], axis=-2)
            r = val - tq
            scale = np.maximum(1.0, np.abs(tq))
            if np.all(np.abs(r) <= tol * scale):
                return y, comps
            det = np.linalg.det(Jx)
            bad = ~(np.abs(det) > 1e-12)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise ProjectionError(f"projection to TQ is not invertible near {tq[i].tolist()} (|det| = {abs(det[i]):.2e})")
            y = y - np.linalg.solve(Jx, r[..., None])[..., 0]
        worst = int(np.argmax(np.max(np.abs(r), axis=-1)))
        raise ProjectionError(f"Newton inversion of the projection did not converge at {tq[worst].tolist()}")

    def differential(self, tq_points):
        _, comps = self.invert(tq_points)
        n2 = 2 * len(self.coords)
        return np.stack([c.value for c in comps[n2:]], -1)

    def hessian(self, tq_points):
        _, comps = self.invert(tq_points)
        n2 = 2 * len(self.coords)
        Jx = np.stack([c.grad for c in comps[:n2]], axis=-2)
        Jp = np.stack([c.grad for c in comps[n2:]], axis=-2)
        return Jp @ np.linalg.inv(Jx)


def flow_extension(sigma, constraints, coords, flow_box, param_samples, h=1e-2, tolerance=1e-9, seed=0, base_point=None):
    """Extend an isotropic ``sigma`` in ``T*TQ`` along the flows of ``X_phi_k``.

    Checks, in order: the constraints vanish on ``sigma`` and their
    Hamiltonian fields are transverse to it (rank of ``[J | X_1 ... X_k]``);
    then, on a node set with one flow-time vector per parameter sample drawn
    from ``flow_box``: isotropy of the extension, dimension ``2n`` (half the
    ambient) and invertibility of the projection to ``TQ``.
    """
    fe = FlowExtension(sigma, constraints, coords, flow_box, h)
    params = np.atleast_2d(np.asarray(param_samples, dtype=float))
    B, n = len(params), len(fe.coords)
    zero = np.concatenate([params, np.zeros((B, fe.k))], -1)

    vanish = np.max(np.abs(fe.constraint_values(zero)), axis=-1) if fe.k else np.zeros(B)
    if np.max(vanish) > tolerance:
        i = int(np.argmax(vanish))
        raise PreconditionError(
            f"constraints do not vanish on sigma: |phi| = {vanish[i]:.3e} at parameters {params[i].tolist()}"
        )
    # transversality at the seed submanifold
    comps = fe.transport(zero)
    J = np.stack([c.grad[:, : fe.param_dim] for c in comps], axis=-2)
    vals = [jets.Jet2(c.value, np.zeros((B, fe.dim)), None) for c in comps]
    X = [np.stack([np.broadcast_to(f.value, (B,)) for f in fe._field(k, vals)], -1) for k in range(fe.k)]
    aug = np.concatenate([J] + [x[..., None] for x in X], axis=-1)
    ranks = np.array([numerical_rank(a) for a in aug])
    if np.any(ranks < fe.dim):
        i = int(np.argmin(ranks))
        raise TransversalityError(
            f"Hamiltonian fields are not transverse to sigma at parameters {params[i].tolist()} "
            f"(rank {ranks[i]} < {fe.dim})"
        )
    trans = ConditionReport("TRANSVERSALITY", 0.0)
    trans.samples_used = B
    trans.require("min_rank", float(ranks.min()), fe.dim, ">=")

    rng = np.random.default_rng(seed)
    s = fe.flow_box[:, 0] + (fe.flow_box[:, 1] - fe.flow_box[:, 0]) * rng.random((B, fe.k))
    nodes = np.concatenate([params, s], -1)
    iso = isotropy_residual(fe.immersion(), nodes, max(tolerance, 1e-6))
    dim_rep = ConditionReport("DIMENSION", 0.0)
    dim_rep.samples_used = 1
    dim_rep.require("dimension", fe.dim, 2 * n, "==")
    jac = fe.jacobian(nodes)
    det_x = np.abs(np.linalg.det(jac[:, : 2 * n, :])) if fe.dim == 2 * n else np.zeros(B)
    graph = ConditionReport("GRAPH_OVER_TQ", 0.0)
    graph.samples_used = B
    graph.require("min_abs_det_projection", float(det_x.min()), 1e-8, ">")
    if not graph.passed and fe.dim == 2 * n:
        i = int(np.argmin(det_x))
        graph.extras["failing_node"] = nodes[i].tolist()
    reports = {"transversality": trans, "isotropy": iso, "dimension": dim_rep, "graph": graph}

    tq_nodes = fe.nodes(nodes)[:, : 2 * n]
    base = tq_nodes[0] if base_point is None else np.asarray(base_point, dtype=float)
    scalar = ReconstructedScalar(fe.differential, base)
    result = ExtensionResult(
        FLOW, fe.coords, fe.differential, fe.hessian, scalar, None, reports, flow=fe
    )
    result.extras = {"nodes": nodes, "tq_nodes": tq_nodes}
    if graph.passed:
        result.regularity = _regularity(result, tq_nodes)
    return result


def image_deviation(result, L_bar, points=None):
    """Max difference between the extension's differential and ``dL_bar``.

    For flow results with ``points=None`` the comparison is made at the
    transported nodes themselves (no inversion needed).
    """
    lagr = L_bar if isinstance(L_bar, LagrangianDef) else LagrangianDef(L_bar, result.coords, time_dependent=False)
    n = result.n
    if points is None:
        fe = result.flow
        nodes = result.extras["nodes"]
        vals = fe.nodes(nodes)
        tq, mom = vals[:, : 2 * n], vals[:, 2 * n :]
    else:
        tq = np.atleast_2d(np.asarray(points, dtype=float))
        mom = result.differential(tq)
    ref = lagr.jet(tq).grad[:, -2 * n :]
    rep = ConditionReport("IMAGE_OF_DIFFERENTIAL", 1e-6)
    rep.samples_used = len(tq)
    rep.equations["momentum_deviation"] = Stat.of(np.max(np.abs(mom - ref), axis=-1))
    return rep


# -- trajectory comparison ---------------------------------------------------


def _initial_tq(sode, state):
    state = np.asarray(state, dtype=float)
    n, m = sode.n, sode.m
    k = n - m
    if len(state) == n + k:
        return _lift_to_tq(sode, state[None, :])[0], True
    if len(state) == 2 * n:
        on = _lift_to_tq(sode, state[None, : n + k])[0]
        return state, bool(np.all(np.abs(on[n + k :] - state[n + k :]) <= 1e-12 * np.maximum(1, np.abs(state[n + k :]))))
    raise InputError(f"initial state must have {n + k} (M chart) or {2 * n} (TQ) entries, got {len(state)}")


def verify_extension(result, sode, initial_states, t_final, h=1e-3, tolerance=1e-6, residual_stride=50, trajectories=None):
    """Compare Euler-Lagrange motion of the extension with the SODE on ``M``.

    With a symbolic ``Lbar`` both systems are integrated from identical data
    and the report gives the max state deviation and the constraint drift
    of the ``Lbar`` trajectory.  For purely numerical extensions the
    Euler-Lagrange residual of ``Lbar`` is evaluated along the constrained
    trajectory instead (every ``residual_stride`` steps).  Integrated runs
    are stored in ``trajectories`` (a dict) when one is passed.
    """
    if not isinstance(sode, Sode) or sode.time_dependent:
        raise SemanticError("verify_extension needs an autonomous Sode", section="checks")
    n, m = sode.n, sode.m
    k = n - m
    rep = ConditionReport("VERIFY_EXTENSION", tolerance)
    dev_all, drift_all, res_all = [], [], []
    on_all = True
    notes = []
    flow = ConstrainedFlow(sode)
    for idx_state, state in enumerate(np.atleast_2d(np.asarray(initial_states, dtype=float))):
        x0, on_m = _initial_tq(sode, state)
        on_all = on_all and on_m
        ref = integrate(flow, np.concatenate([x0[:n], x0[n : n + k]]), t_final, h)
        if ref.truncated:
            notes.append(f"constrained run {ref.truncated}")
        if trajectories is not None:
            trajectories[f"constrained_{idx_state}"] = ref
        if result.lagrangian is not None:
            try:
                got = integrate(el_sode(result.lagrangian), x0, t_final, h)
            except SingularHessian as exc:
                notes.append(str(exc))
                continue
            if got.truncated:
                notes.append(f"extension run {got.truncated}")
            if trajectories is not None:
                trajectories[f"extension_{idx_state}"] = got
            L = min(len(got), len(ref))
            dev = np.max(np.abs(np.concatenate([got.q[:L] - ref.q[:L], got.qd[:L] - ref.qd[:L]], -1)), axis=-1)
            psi = _lift_to_tq(sode, np.concatenate([got.q, got.qd[:, :k]], -1))[:, n + k :]
            drift = np.max(np.abs(got.qd[:, k:] - psi), axis=-1) if m else np.zeros(len(got))
            dev_all.append(dev)
            drift_all.append(drift)
            if got.truncated is not None:
                dev_all.append(np.array([np.inf]))
        else:
            qdd = stencil_derivative(ref.times, ref.qd)
            idx = np.arange(2, len(ref) - 2, residual_stride)
            tq = np.concatenate([ref.q[idx], ref.qd[idx]], -1)
            mom = result.differential(tq)
            H = result.hessian(tq)
            xdot = np.concatenate([ref.qd[idx], qdd[idx]], -1)
            el = np.einsum("bij,bj->bi", H[:, n:, :], xdot) - mom[:, :n]
            res_all.append(np.max(np.abs(el), axis=-1))
    if dev_all:
        rep.equations["state_deviation"] = Stat.of(np.concatenate(dev_all))
        rep.equations["constraint_drift"] = Stat.of(np.concatenate(drift_all))
    if res_all:
        rep.equations["euler_lagrange_residual"] = Stat.of(np.concatenate(res_all))
    rep.samples_used = len(np.atleast_2d(initial_states)) if (dev_all or res_all) else 0
    rep.require("initial_states_on_M", float(on_all), 1.0, "==")
    rep.extras["equivalence_claimed"] = bool(on_all)
    rep.extras["t_final"] = float(t_final)
    rep.extras["h"] = float(h)
    if notes:
        rep.extras["notes"] = notes
    return rep
