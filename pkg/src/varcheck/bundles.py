"""Coordinate models of the canonical bundles and the forms built on them.

Chart conventions (used everywhere in the package):

* ``TQ`` and the constraint submanifold ``M``: coordinates ``(t?, q, v)``
  where ``v`` are the free velocities.  Coordinates are ordered with the free
  ones first and the constrained ones last; the velocity of a constrained
  coordinate is the constraint function ``psi``.
* ``TTQ``: ``(q, v, qdot, vdot)``.  ``kappa_q`` swaps the middle blocks.
* ``T*TQ``: ``(q, qdot, mu, mut)`` with symplectic form
  ``dq ^ dmu + dqdot ^ dmut``.
* ``TT*Q``: ``(q, p, qdot, pdot)`` with symplectic form
  ``dqdot ^ dp + dq ^ dpdot``.
* ``alpha_q(q, p, qdot, pdot) = (q, qdot, pdot, p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jets
from .errors import SemanticError
from .expr import as_expr
from .jets import VarSpace
from .reports import ConditionReport, Stat, sweep

__all__ = [
    "velocity_name",
    "Sode",
    "FiberMap",
    "CovectorSample",
    "SodeJets",
    "kappa_q",
    "alpha_q",
    "alpha_q_inv",
    "mu_form",
    "lie_derivative_form",
    "tf_gamma",
    "OneForm",
    "ImmersionSample",
    "T_STAR_TQ",
    "TT_STAR_Q",
    "closedness_residual",
    "isotropy_residual",
    "sigma_immersion",
    "s_immersion",
    "numerical_rank",
]


def velocity_name(q):
    return q + "d"


def _exprs(items):
    return [as_expr(e) for e in items]


class Sode:
    """A second-order system on ``TQ`` or on a constraint submanifold ``M``.

    ``coords`` lists all ``n`` coordinates; the last ``len(psi)`` of them are
    constrained, with velocities ``psi``.  ``gamma`` gives the accelerations
    of the free coordinates.
    """

    def __init__(self, coords, gamma, psi=(), time_dependent=None, time="t"):
        self.coords = tuple(coords)
        self.gamma = _exprs(gamma)
        self.psi = _exprs(psi)
        self.time = time
        n, m = len(self.coords), len(self.psi)
        if m >= n and n > 0:
            raise SemanticError(f"{m} constraints leave no free coordinates out of {n}", section="constraints")
        if len(self.gamma) != n - m:
            raise SemanticError(
                f"expected {n - m} accelerations for the free coordinates, got {len(self.gamma)}", section="sode"
            )
        used = set()
        for e in self.gamma + self.psi:
            used |= e.free_vars
        if time_dependent is None:
            time_dependent = time in used
        self.time_dependent = bool(time_dependent)
        names = ([time] if self.time_dependent else []) + list(self.coords) + [velocity_name(q) for q in self.free]
        self.space = VarSpace(names)
        for section, exprs in (("sode", self.gamma), ("constraints", self.psi)):
            for e in exprs:
                for v in sorted(e.free_vars):
                    if v not in self.space:
                        raise SemanticError(f"undeclared variable {v!r}", section=section, name=v)

    @property
    def n(self):
        return len(self.coords)

    @property
    def m(self):
        return len(self.psi)

    @property
    def free(self):
        return self.coords[: self.n - self.m]

    @property
    def constrained(self):
        return self.coords[self.n - self.m :]

    @property
    def velocities(self):
        return tuple(velocity_name(q) for q in self.free)

    @property
    def t_index(self):
        return 0 if self.time_dependent else None

    def q_index(self, i):
        return (1 if self.time_dependent else 0) + i

    def v_index(self, a):
        return (1 if self.time_dependent else 0) + self.n + a

    @property
    def state_indices(self):
        """Indices of the non-time coordinates of the chart on M."""
        off = 1 if self.time_dependent else 0
        return list(range(off, self.space.dim))

    def as_time_dependent(self):
        return Sode(self.coords, self.gamma, self.psi, True, self.time)

    def as_autonomous(self):
        if self.time_dependent and any(self.time in e.free_vars for e in self.gamma + self.psi):
            raise SemanticError("the system depends on time", section="sode")
        return Sode(self.coords, self.gamma, self.psi, False, self.time)

    def __repr__(self):
        return f"Sode(coords={list(self.coords)}, m={self.m}, time_dependent={self.time_dependent})"


class FiberMap:
    """Momentum components ``F_i`` of a map into ``T*Q`` over ``Q``."""

    def __init__(self, components, name=None):
        self.components = _exprs(components)
        self.name = name

    def __len__(self):
        return len(self.components)

    def check(self, sode, section="fibermap"):
        if len(self.components) != sode.n:
            raise SemanticError(
                f"fibre map {self.name or ''} has {len(self.components)} components, expected {sode.n}".replace("  ", " "),
                section=section,
            )
        for e in self.components:
            for v in sorted(e.free_vars):
                if v not in sode.space:
                    raise SemanticError(f"undeclared variable {v!r}", section=section, name=v)
        return self

    def perturbed(self, index, delta):
        comps = list(self.components)
        comps[index] = comps[index] + as_expr(delta)
        return FiberMap(comps, (self.name or "F") + "+perturbation")


@dataclass
class CovectorSample:
    base: np.ndarray
    comps: np.ndarray


def _J(x, dim, batch):
    return jets.as_jet(x, dim, batch)


class SodeJets:
    """Jets of everything attached to a Sode at a batch of points of M."""

    def __init__(self, sode, points, fibermap=None):
        self.sode = sode
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[-1] != sode.space.dim:
            raise ValueError(f"points have {points.shape[-1]} coordinates, chart has {sode.space.dim}")
        self.points = points
        self.batch = points.shape[0]
        dim = sode.space.dim
        x = jets.seed(sode.space, points)
        self.x = x
        shape = (self.batch,)
        self.t = x[0] if sode.time_dependent else None
        self.q = [x[sode.q_index(i)] for i in range(sode.n)]
        self.v = [x[sode.v_index(a)] for a in range(sode.n - sode.m)]
        self.gamma = [_J(e.compile(sode.space)(x), dim, shape) for e in sode.gamma]
        self.psi = [_J(e.compile(sode.space)(x), dim, shape) for e in sode.psi]
        self.velocity = self.v + self.psi
        self.F = None
        if fibermap is not None:
            self.F = [_J(e.compile(sode.space)(x), dim, shape) for e in fibermap.components]

    def eval(self, expr):
        return _J(as_expr(expr).compile(self.sode.space)(self.x), self.sode.space.dim, (self.batch,))

    # partial-derivative values (arrays over the batch)
    def dq(self, jet, i):
        return jet.grad[..., self.sode.q_index(i)]

    def dv(self, jet, a):
        return jet.grad[..., self.sode.v_index(a)]

    def dt(self, jet):
        if not self.sode.time_dependent:
            return np.zeros(self.batch)
        return jet.grad[..., 0]

    def _hidx(self, kind, i):
        if kind == "q":
            return self.sode.q_index(i)
        if kind == "v":
            return self.sode.v_index(i)
        return 0

    def d2(self, jet, kind1, i, kind2, j):
        """Second partial, e.g. ``d2(F, 'q', k, 'v', b)``; kind 't' means time."""
        if "t" in (kind1, kind2) and not self.sode.time_dependent:
            return np.zeros(self.batch)
        return jet.hess[..., self._hidx(kind1, i), self._hidx(kind2, j)]

    def lie(self, jet):
        """Derivative along the vector field d/dt + v.d/dq + Gamma.d/dv.

        For a second-order jet the result is a first-order jet; for a
        first-order jet only the value is available and an array is returned.
        """
        s = self.sode
        if jet.order == 2:
            out = jet.partial(0) if s.time_dependent else None
            for i in range(s.n):
                term = self.velocity[i] * jet.partial(s.q_index(i))
                out = term if out is None else out + term
            for a in range(s.n - s.m):
                out = out + self.gamma[a] * jet.partial(s.v_index(a))
            if out is None:
                return jets.Jet2(np.zeros(self.batch), np.zeros((self.batch, s.space.dim)), None)
            return out
        val = self.dt(jet) + 0.0
        for i in range(s.n):
            val = val + self.velocity[i].value * self.dq(jet, i)
        for a in range(s.n - s.m):
            val = val + self.gamma[a].value * self.dv(jet, a)
        return val

    def gamma_of_terms(self, jet):
        """The additive terms of the derivative of ``jet`` along the vector field."""
        s = self.sode
        terms = []
        if s.time_dependent:
            terms.append(self.dt(jet))
        terms += [self.velocity[i].value * self.dq(jet, i) for i in range(s.n)]
        terms += [self.gamma[a].value * self.dv(jet, a) for a in range(s.n - s.m)]
        return terms

    def gamma_of_derivative_terms(self, jet, kind, k):
        """Additive terms of d/dx [Gamma(jet)] for x = q^k ('q') or v^k ('v')."""
        s = self.sode
        terms = []
        if s.time_dependent:
            terms.append(self.d2(jet, kind, k, "t", 0))
        for i in range(s.n):
            vel = self.velocity[i]
            terms.append(vel.value * self.d2(jet, kind, k, "q", i))
            dvel = self.dq(vel, k) if kind == "q" else self.dv(vel, k)
            terms.append(dvel * self.dq(jet, i))
        for a in range(s.n - s.m):
            g = self.gamma[a]
            terms.append(g.value * self.d2(jet, kind, k, "v", a))
            dg = self.dq(g, k) if kind == "q" else self.dv(g, k)
            terms.append(dg * self.dv(jet, a))
        return terms


# -- Tulczyjew maps ---------------------------------------------------------


def _blocks(p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] % 4:
        raise ValueError(f"expected 4n coordinates, got {p.shape[-1]}")
    n = p.shape[-1] // 4
    return [p[..., k * n : (k + 1) * n] for k in range(4)]


def kappa_q(p):
    """Canonical involution of TTQ: (q, v, qdot, vdot) -> (q, qdot, v, vdot)."""
    a, b, c, d = _blocks(p)
    return np.concatenate([a, c, b, d], axis=-1)


def alpha_q(p):
    """TT*Q -> T*TQ: (q, p, qdot, pdot) -> (q, qdot, pdot, p)."""
    a, b, c, d = _blocks(p)
    return np.concatenate([a, c, d, b], axis=-1)


def alpha_q_inv(p):
    """T*TQ -> TT*Q: (q, qdot, mu, mut) -> (q, mut, qdot, mu)."""
    a, b, c, d = _blocks(p)
    return np.concatenate([a, d, b, c], axis=-1)


# -- mu_{Gamma,F} -----------------------------------------------------------


def _require_fibermap(sode, fibermap):
    if fibermap is None:
        raise SemanticError("a fibre map is required", section="fibermap")
    fibermap.check(sode)


def _tf_gamma_arrays(sj):
    """(q, p, qdot, pdot) arrays; pdot_i = dF_i/dq . qdot + dF_i/dv . Gamma (+ dF_i/dt)."""
    s = sj.sode
    q = np.stack([j.value for j in sj.q], axis=-1)
    p = np.stack([f.value for f in sj.F], axis=-1)
    qdot = np.stack([np.broadcast_to(v.value, (sj.batch,)) for v in sj.velocity], axis=-1)
    pdot = []
    for f in sj.F:
        acc = sj.dt(f) * 1.0
        for i in range(s.n):
            acc = acc + sj.dq(f, i) * sj.velocity[i].value
        for a in range(s.n - s.m):
            acc = acc + sj.dv(f, a) * sj.gamma[a].value
        pdot.append(acc)
    pdot = np.stack(pdot, axis=-1)
    return np.concatenate([q, p, qdot, pdot], axis=-1)


def tf_gamma(sode, fibermap, point):
    """The point TF(Gamma(x)) of TT*Q, as (q, F, qdot, Gamma(F))."""
    _require_fibermap(sode, fibermap)
    point = np.asarray(point, dtype=float)
    out = _tf_gamma_arrays(SodeJets(sode, point, fibermap))
    return out[0] if point.ndim == 1 else out


def mu_form(sode, fibermap, point):
    """Components of mu_{Gamma,F} = alpha_Q(TF(Gamma)) at ``point``.

    Returns a CovectorSample with base (q, qdot) in TQ (constrained velocities
    filled in from psi) and comps (mu, mut).
    """
    arr = alpha_q(tf_gamma(sode, fibermap, point))
    n = sode.n
    return CovectorSample(arr[..., : 2 * n], arr[..., 2 * n :])


def _lie_form_jets(sj):
    """Components of the Lie derivative of F*theta along Gamma, pulled back to M."""
    s = sj.sode
    F = sj.F
    comps = []
    for i in range(s.n):
        c = sj.lie(F[i])
        for al in range(s.m):
            c = c + sj.psi[al].partial(s.q_index(i)) * F[s.n - s.m + al]
        comps.append(c)
    for a in range(s.n - s.m):
        c = F[a]
        for al in range(s.m):
            c = c + sj.psi[al].partial(s.v_index(a)) * F[s.n - s.m + al]
        comps.append(c)
    return comps


def lie_derivative_form(sode, fibermap, point):
    """Lie derivative of F*theta_Q along Gamma, as a 1-form on M.

    Computed from the derivative of F along the vector field, independently
    of :func:`mu_form`.  Components are ordered (dq^1..dq^n, dv^1..dv^(n-m)).
    Without constraints the result coincides with the (mu, mut) components.
    """
    _require_fibermap(sode, fibermap)
    point = np.asarray(point, dtype=float)
    sj = SodeJets(sode, point, fibermap)
    comps = np.stack([np.broadcast_to(c.value, (sj.batch,)) for c in _lie_form_jets(sj)], axis=-1)
    base = sj.points[:, sode.state_indices]
    if point.ndim == 1:
        return CovectorSample(base[0], comps[0])
    return CovectorSample(base, comps)


# -- 1-forms and closedness ------------------------------------------------


class OneForm:
    """A 1-form over selected coordinates of a chart.

    ``comps_fn(points)`` returns one jet per coordinate in ``coords`` (indices
    into ``space``); jets need gradients only.
    """

    def __init__(self, space, comps_fn, coords=None, name="form"):
        self.space = space
        self.comps_fn = comps_fn
        self.coords = list(range(space.dim)) if coords is None else list(coords)
        self.name = name

    @classmethod
    def from_exprs(cls, space, exprs, coords=None, name="form"):
        exprs = _exprs(exprs)
        fns = [e.compile(space) for e in exprs]

        def comps(points):
            x = jets.seed(space, points)
            shape = np.shape(points)[:-1]
            return [_J(fn(x), space.dim, shape) for fn in fns]

        return cls(space, comps, coords, name)

    @classmethod
    def exact(cls, space, scalar, coords=None):
        """dL for an expression L."""
        scalar = as_expr(scalar)
        fn = scalar.compile(space)
        idx = list(range(space.dim)) if coords is None else list(coords)

        def comps(points):
            f = _J(fn(jets.seed(space, points)), space.dim, np.shape(points)[:-1])
            return [f.partial(k) for k in idx]

        return cls(space, comps, idx, f"d({scalar.pretty()})")

    @classmethod
    def mu(cls, sode, fibermap):
        """mu_{Gamma,F} (pulled back to M when constrained) via the Lie route."""
        _require_fibermap(sode, fibermap)

        def comps(points):
            return _lie_form_jets(SodeJets(sode, points, fibermap))

        return cls(sode.space, comps, sode.state_indices, "mu")

    def values(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack([np.broadcast_to(c.value, (len(points),)) for c in self.comps_fn(points)], axis=-1)

    def __call__(self, point):
        point = np.asarray(point, dtype=float)
        v = self.values(point)
        return CovectorSample(point, v[0] if point.ndim == 1 else v)


def closedness_residual(form, samples, tolerance=1e-10):
    """max |dc_j/dx^i - dc_i/dx^j| over samples (zero iff the form is closed there)."""
    coords = form.coords

    def fn(batch):
        comps = form.comps_fn(batch)
        worst = np.zeros(len(batch))
        for a in range(len(coords)):
            for b in range(a + 1, len(coords)):
                r = np.abs(comps[b].grad[..., coords[a]] - comps[a].grad[..., coords[b]])
                worst = np.maximum(worst, r)
        return {"d": worst}

    out, skipped, reasons, _ = sweep(samples, fn, form.space.names)
    rep = ConditionReport("CLOSEDNESS", tolerance)
    rep.samples_used = len(out.get("d", []))
    rep.samples_skipped = skipped
    rep.skip_reasons = reasons
    rep.equations["antisymmetric_derivative"] = Stat.of(out.get("d", []))
    return rep


# -- immersions and isotropy -------------------------------------------------

T_STAR_TQ = "T*TQ"
TT_STAR_Q = "TT*Q"


def _conjugate_blocks(chart, target_dim):
    n = target_dim // 4
    if chart == T_STAR_TQ:
        half = target_dim // 2
        return list(range(half)), list(range(half, target_dim))
    if chart == TT_STAR_Q:
        x = list(range(2 * n, 3 * n)) + list(range(0, n))
        p = list(range(n, 2 * n)) + list(range(3 * n, 4 * n))
        return x, p
    if isinstance(chart, tuple) and len(chart) == 2:
        return list(chart[0]), list(chart[1])
    raise ValueError(f"unknown chart {chart!r}")


class ImmersionSample:
    """A parametrized submanifold of a symplectic chart."""

    def __init__(self, params, target_dim, chart, map_fn, name="immersion"):
        if target_dim % 2:
            raise ValueError("symplectic target must have even dimension")
        self.params = params
        self.target_dim = target_dim
        self.chart = chart
        self.map_fn = map_fn
        self.name = name
        self.x_block, self.p_block = _conjugate_blocks(chart, target_dim)

    @classmethod
    def from_exprs(cls, params, exprs, chart=T_STAR_TQ, name="immersion"):
        exprs = _exprs(exprs)
        fns = [e.compile(params) for e in exprs]

        def fn(points):
            x = jets.seed(params, points)
            shape = np.shape(points)[:-1]
            return [_J(f(x), params.dim, shape) for f in fns]

        return cls(params, len(exprs), chart, fn, name)

    def jacobian(self, points):
        comps = self.map_fn(np.atleast_2d(points))
        return np.stack([c.grad for c in comps], axis=-2)  # (B, target, params)

    def evaluate(self, points):
        points = np.atleast_2d(points)
        comps = self.map_fn(points)
        return np.stack([np.broadcast_to(c.value, (len(points),)) for c in comps], axis=-1)


def numerical_rank(a, rel_threshold=1e-10):
    """Rank by Gaussian elimination with complete pivoting.

    Entries below ``rel_threshold`` times the largest absolute entry of the
    input count as zero.
    """
    a = np.array(a, dtype=float)
    if a.size == 0:
        return 0
    scale = np.max(np.abs(a))
    if scale == 0:
        return 0
    thresh = rel_threshold * scale
    rank = 0
    rows, cols = a.shape
    for k in range(min(rows, cols)):
        sub = np.abs(a[k:, k:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        if sub[i, j] <= thresh:
            break
        i += k
        j += k
        a[[k, i]] = a[[i, k]]
        a[:, [k, j]] = a[:, [j, k]]
        piv = a[k, k]
        a[k + 1 :, k:] -= np.outer(a[k + 1 :, k] / piv, a[k, k:])
        rank += 1
    return rank


def isotropy_residual(imm, samples, tolerance=1e-10):
    """Pull back the chart's symplectic form: R = Jx^T Jp - Jp^T Jx."""

    def fn(batch):
        J = imm.jacobian(batch)
        jx = J[:, imm.x_block, :]
        jp = J[:, imm.p_block, :]
        R = np.einsum("bki,bkj->bij", jx, jp) - np.einsum("bki,bkj->bij", jp, jx)
        ranks = np.array([numerical_rank(Jb) for Jb in J], dtype=float)
        return {"r": np.max(np.abs(R), axis=(1, 2)) if R.size else np.zeros(len(batch)), "rank": ranks}

    out, skipped, reasons, _ = sweep(samples, fn, imm.params.names)
    rep = ConditionReport("ISOTROPY", tolerance)
    rep.samples_used = len(out.get("r", []))
    rep.samples_skipped = skipped
    rep.skip_reasons = reasons
    rep.equations["pullback_symplectic_form"] = Stat.of(out.get("r", []))
    ranks = out.get("rank", np.array([]))
    rep.extras["rank_min"] = int(ranks.min()) if ranks.size else 0
    rep.extras["rank_max"] = int(ranks.max()) if ranks.size else 0
    rep.extras["parameter_dim"] = imm.params.dim
    rep.extras["ambient_dim"] = imm.target_dim
    rep.extras["immersion"] = bool(ranks.size and ranks.min() == imm.params.dim)
    rep.extras["lagrangian_dimension"] = 2 * imm.params.dim == imm.target_dim
    return rep


def sigma_immersion(sode, fibermap):
    """Sigma_{Gamma,F} = Im(mu_{Gamma,F}) in T*TQ, parametrized by M."""
    _require_fibermap(sode, fibermap)
    if sode.time_dependent:
        sode = sode.as_autonomous()
    n, m = sode.n, sode.m

    def fn(points):
        sj = SodeJets(sode, points, fibermap)
        pdot = []
        for f in sj.F:
            acc = None
            for i in range(n):
                term = f.partial(sode.q_index(i)) * sj.velocity[i]
                acc = term if acc is None else acc + term
            for a in range(n - m):
                acc = acc + f.partial(sode.v_index(a)) * sj.gamma[a]
            pdot.append(acc)
        return list(sj.q) + list(sj.velocity) + pdot + list(sj.F)

    return ImmersionSample(sode.space, 4 * n, T_STAR_TQ, fn, "Sigma")


def s_immersion(sode, fibermap):
    """S_{Gamma,F} = TF(Gamma(M)) in TT*Q."""
    sig = sigma_immersion(sode, fibermap)

    def fn(points):
        comps = sig.map_fn(points)
        n = sode.n
        q, qd, mu, mut = comps[:n], comps[n : 2 * n], comps[2 * n : 3 * n], comps[3 * n :]
        return q + mut + qd + mu

    return ImmersionSample(sig.params, sig.target_dim, TT_STAR_Q, fn, "S")
