"""Dynamics engines used to test condition verdicts against actual motion.

Charts follow the package convention: a Lagrangian lives on ``(t?, q, qd)``
with velocity names ``<q>d``.  Evaluators work on batches of chart points of
shape ``(batch, dim)``; the integrator drives them one point at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jets
from .bundles import FiberMap, Sode, velocity_name
from .errors import (
    SemanticError,
    SingularBorderedSystem,
    SingularConstraintMatrix,
    SingularHessian,
    SingularJacobian,
    VarcheckError,
)
from .expr import as_expr, compile_scalars
from .jets import VarSpace
from .reports import ConditionReport, Stat, sweep

__all__ = [
    "HESSIAN_THRESHOLD",
    "LagrangianDef",
    "LinearConstraints",
    "ChaplyginData",
    "Trajectory",
    "EulerLagrangeSode",
    "NonholonomicSode",
    "VakonomicSystem",
    "ConstrainedFlow",
    "ChaplyginReduced",
    "el_sode",
    "el_residual",
    "nonholonomic_sode",
    "vakonomic_system",
    "integrate",
    "chaplygin_curvature",
    "chaplygin_curvature_exprs",
    "chaplygin_reduce",
    "hamiltonization_residual",
    "legendre_map",
    "energy",
    "stencil_derivative",
    "jet_solve",
]

HESSIAN_THRESHOLD = 1e-12


def _batch(points, dim):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[-1] != dim:
        raise ValueError(f"points have {points.shape[-1]} coordinates, chart has {dim}")
    return points


def _guard_det(mat, error, points, times=None):
    """Raise ``error`` at the first sample whose matrix is numerically singular."""
    if mat.shape[-1] == 0:
        return
    det = np.linalg.det(mat)
    scale = np.maximum(1.0, np.max(np.abs(mat), axis=(-2, -1))) ** mat.shape[-1]
    bad = ~(np.abs(det) >= HESSIAN_THRESHOLD * scale)
    if np.any(bad):
        k = int(np.argmax(bad))
        t = None if times is None else float(np.atleast_1d(times)[k])
        raise error(float(det[k]), point=points[k], time=t)


class LagrangianDef:
    """A Lagrangian on the chart ``(t?, q, qd)``."""

    def __init__(self, L, coords, time_dependent=None, time="t", regular_hint=True, section="lagrangian"):
        self.L = as_expr(L)
        self.coords = tuple(coords)
        self.velocities = tuple(velocity_name(q) for q in self.coords)
        self.time = time
        if time_dependent is None:
            time_dependent = time in self.L.free_vars
        self.time_dependent = bool(time_dependent)
        self.regular_hint = bool(regular_hint)
        self.space = VarSpace(([time] if self.time_dependent else []) + list(self.coords) + list(self.velocities))
        for v in sorted(self.L.free_vars):
            if v not in self.space:
                raise SemanticError(f"undeclared variable {v!r}", section=section, name=v)
        off = 1 if self.time_dependent else 0
        self._qi = np.arange(off, off + self.n)
        self._vi = np.arange(off + self.n, off + 2 * self.n)
        self._symbolic = None

    @property
    def n(self):
        return len(self.coords)

    def point(self, t, q, qd):
        """Chart point(s) from separate pieces; ``t`` is ignored when autonomous."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        qd = np.atleast_1d(np.asarray(qd, dtype=float))
        parts = [q, qd]
        if self.time_dependent:
            t = np.broadcast_to(np.asarray(t, dtype=float), q.shape[:-1] + (1,))
            parts.insert(0, t)
        return np.concatenate(parts, axis=-1)

    def split(self, points):
        points = np.asarray(points, dtype=float)
        t = points[..., 0] if self.time_dependent else np.zeros(points.shape[:-1])
        return t, points[..., self._qi], points[..., self._vi]

    def jet(self, points):
        points = _batch(points, self.space.dim)
        return self.L.eval_jet(self.space, points)

    def parts(self, points, route="jets"):
        """Derivatives of L at a batch: dict with Lq, Lv, W, Lvq, Lvt, R.

        ``R = Lq - Lvq qd - Lvt`` is the right-hand side of ``W qdd = R``.
        ``route="jets"`` propagates jets through L; ``route="symbolic"``
        evaluates symbolically differentiated expressions point by point,
        which is much faster for the single-point calls of an integrator.
        """
        points = _batch(points, self.space.dim)
        if route == "symbolic":
            out = self._symbolic_parts(points)
        else:
            j = self.jet(points)
            qi, vi = self._qi, self._vi
            hess = j.hess
            out = {
                "value": j.value,
                "Lq": j.grad[:, qi],
                "Lv": j.grad[:, vi],
                "W": hess[:, vi][:, :, vi],
                "Lvq": hess[:, vi][:, :, qi],
                "Lvt": hess[:, vi, 0] if self.time_dependent else np.zeros((points.shape[0], self.n)),
            }
        qd = points[:, self._vi]
        out["R"] = out["Lq"] - np.einsum("bik,bk->bi", out["Lvq"], qd) - out["Lvt"]
        return out

    def _symbolic_parts(self, points):
        n = self.n
        if self._symbolic is None:
            L = self.L
            Lv = [L.diff(v) for v in self.velocities]
            flat = [L] + [L.diff(q) for q in self.coords] + Lv
            flat += [Lv[i].diff(v) for i in range(n) for v in self.velocities]
            flat += [Lv[i].diff(q) for i in range(n) for q in self.coords]
            if self.time_dependent:
                flat += [Lv[i].diff(self.time) for i in range(n)]
            self._symbolic = compile_scalars(flat, self.space)
        rows = np.array([self._symbolic(p.tolist()) for p in points])
        B = points.shape[0]
        k = 1 + 2 * n
        return {
            "value": rows[:, 0],
            "Lq": rows[:, 1 : 1 + n],
            "Lv": rows[:, 1 + n : k],
            "W": rows[:, k : k + n * n].reshape(B, n, n),
            "Lvq": rows[:, k + n * n : k + 2 * n * n].reshape(B, n, n),
            "Lvt": rows[:, k + 2 * n * n :] if self.time_dependent else np.zeros((B, n)),
        }

    def legendre(self, name=None):
        """Momenta ``dL/dqd`` as symbolic expressions on the same chart."""
        return FiberMap([self.L.diff(v) for v in self.velocities], name or "Legendre")

    def __repr__(self):
        return f"LagrangianDef({self.L.pretty()!r}, coords={list(self.coords)})"


def legendre_map(lagr, sode=None, name=None):
    """Legendre fibre map of ``lagr``, restricted to the chart of ``sode`` if given.

    On a constraint submanifold the constrained velocities are replaced by the
    constraint functions.
    """
    F = lagr.legendre(name)
    if sode is None or sode.m == 0:
        return F
    subs = {velocity_name(q): psi for q, psi in zip(sode.constrained, sode.psi)}
    return FiberMap([c.substitute(subs) for c in F.components], F.name)


def energy(lagr, points):
    """E_L = qd . dL/dqd - L."""
    p = lagr.parts(points)
    _, _, qd = lagr.split(_batch(points, lagr.space.dim))
    return np.einsum("bi,bi->b", qd, p["Lv"]) - p["value"]


def el_residual(lagr, points, qdd):
    """Euler-Lagrange left-hand side ``d/dt(dL/dqd) - dL/dq`` along (qd, qdd)."""
    points = _batch(points, lagr.space.dim)
    qdd = np.atleast_2d(np.asarray(qdd, dtype=float))
    p = lagr.parts(points)
    return np.einsum("bij,bj->bi", p["W"], qdd) - p["R"]


# -- first-order systems for the integrator ----------------------------------


class _System:
    """Shared plumbing: state layout (q, qd[, lam]) and constraint residuals."""

    coords = ()
    n_multipliers = 0
    constraint_exprs = ()
    constraint_space = None

    def split_state(self, x):
        n = len(self.coords)
        lam = x[2 * n :] if self.n_multipliers else None
        return x[:n], x[n : 2 * n], lam

    def unpack(self, t, x):
        """``(q, qd, lam)`` from an integrator state."""
        return self.split_state(x)

    _residual_fn = None

    def constraint_residuals(self, t, x):
        if not self.constraint_exprs:
            return np.zeros(0)
        if self._residual_fn is None:
            self._residual_fn = compile_scalars(self.constraint_exprs, self.constraint_space)
        q, qd, _ = self.split_state(x)
        return np.array(self._residual_fn(self._chart_point(t, q, qd).tolist()))


class EulerLagrangeSode(_System):
    """Accelerations of the Euler-Lagrange equations, ``W qdd = R``."""

    def __init__(self, lagr):
        self.lagr = lagr
        self.coords = lagr.coords

    def _chart_point(self, t, q, qd):
        return self.lagr.point(t, q, qd)

    def accelerations(self, points, times=None, route="jets"):
        points = _batch(points, self.lagr.space.dim)
        p = self.lagr.parts(points, route)
        _guard_det(p["W"], SingularHessian, points, times)
        return np.linalg.solve(p["W"], p["R"][..., None])[..., 0]

    def rhs(self, t, x):
        q, qd, _ = self.split_state(x)
        qdd = self.accelerations(self.lagr.point(t, q, qd)[None, :], times=[t], route="symbolic")[0]
        return np.concatenate([qd, qdd])


def el_sode(lagr):
    return EulerLagrangeSode(lagr)


class LinearConstraints:
    """Constraints ``phi^a = mu^a_i(q) qd^i + mu^a_0(q)``."""

    def __init__(self, mu, mu0=None, section="constraints"):
        self.mu = [[as_expr(e) for e in row] for row in mu]
        m = len(self.mu)
        self.mu0 = [as_expr(e) for e in (mu0 if mu0 is not None else [0.0] * m)]
        if len(self.mu0) != m:
            raise SemanticError(f"mu0 has {len(self.mu0)} entries for {m} constraints", section=section)
        self.section = section

    @property
    def m(self):
        return len(self.mu)

    def constraint_exprs(self, lagr):
        out = []
        for row, c0 in zip(self.mu, self.mu0):
            if len(row) != lagr.n:
                raise SemanticError(f"constraint row has {len(row)} entries, expected {lagr.n}", section=self.section)
            for e in list(row) + [c0]:
                bad = e.free_vars & set(lagr.velocities)
                if bad:
                    raise SemanticError(
                        f"coefficient depends on velocity {sorted(bad)[0]!r}", section=self.section, name=sorted(bad)[0]
                    )
            phi = c0
            for e, v in zip(row, lagr.velocities):
                phi = e * as_expr(v) + phi
            out.append(phi)
        return out


def _constraint_list(lagr, constraints, section="constraints"):
    if constraints is None:
        return []
    if isinstance(constraints, LinearConstraints):
        exprs = constraints.constraint_exprs(lagr)
    else:
        exprs = [as_expr(c) for c in constraints]
    for e in exprs:
        for v in sorted(e.free_vars):
            if v not in lagr.space:
                raise SemanticError(f"undeclared variable {v!r}", section=section, name=v)
    return exprs


_CONSTRAINT_CACHE = {}


def _constraint_parts(lagr, exprs, points, route="jets"):
    """Value and first/second derivatives of the constraints at a batch."""
    B, n, m = points.shape[0], lagr.n, len(exprs)
    if route == "symbolic":
        return _constraint_parts_symbolic(lagr, exprs, points)
    qi, vi = lagr._qi, lagr._vi
    val = np.zeros((B, m))
    phq = np.zeros((B, m, n))
    phv = np.zeros((B, m, n))
    pht = np.zeros((B, m))
    phvv = np.zeros((B, m, n, n))
    phvq = np.zeros((B, m, n, n))
    phvt = np.zeros((B, m, n))
    for a, e in enumerate(exprs):
        j = e.eval_jet(lagr.space, points)
        val[:, a] = j.value
        phq[:, a] = j.grad[:, qi]
        phv[:, a] = j.grad[:, vi]
        phvv[:, a] = j.hess[:, vi][:, :, vi]
        phvq[:, a] = j.hess[:, vi][:, :, qi]
        if lagr.time_dependent:
            pht[:, a] = j.grad[:, 0]
            phvt[:, a] = j.hess[:, vi, 0]
    return {"phi": val, "q": phq, "v": phv, "t": pht, "vv": phvv, "vq": phvq, "vt": phvt}


def _constraint_parts_symbolic(lagr, exprs, points):
    B, n, m = points.shape[0], lagr.n, len(exprs)
    key = (tuple(lagr.space.names), tuple(exprs))
    fn = _CONSTRAINT_CACHE.get(key)
    td = lagr.time_dependent
    if fn is None:
        flat = []
        for e in exprs:
            ev = [e.diff(v) for v in lagr.velocities]
            flat += [e] + [e.diff(q) for q in lagr.coords] + ev
            flat += [e.diff(lagr.time)] if td else [as_expr(0.0)]
            flat += [ev[i].diff(v) for i in range(n) for v in lagr.velocities]
            flat += [ev[i].diff(q) for i in range(n) for q in lagr.coords]
            flat += [ev[i].diff(lagr.time) if td else as_expr(0.0) for i in range(n)]
        fn = compile_scalars(flat, lagr.space)
        _CONSTRAINT_CACHE[key] = fn
    per = 2 + 3 * n + 2 * n * n
    rows = np.array([fn(p.tolist()) for p in points]).reshape(B, m, per)
    o = 1
    out = {"phi": rows[:, :, 0], "q": rows[:, :, o : o + n], "v": rows[:, :, o + n : o + 2 * n]}
    o += 2 * n
    out["t"] = rows[:, :, o]
    o += 1
    out["vv"] = rows[:, :, o : o + n * n].reshape(B, m, n, n)
    o += n * n
    out["vq"] = rows[:, :, o : o + n * n].reshape(B, m, n, n)
    o += n * n
    out["vt"] = rows[:, :, o : o + n]
    return out


class NonholonomicSode(_System):
    """Lagrange-d'Alembert dynamics with multipliers eliminated in closed form."""

    def __init__(self, lagr, constraints):
        self.lagr = lagr
        self.coords = lagr.coords
        self.constraint_exprs = _constraint_list(lagr, constraints)
        self.constraint_space = lagr.space

    def _chart_point(self, t, q, qd):
        return self.lagr.point(t, q, qd)

    def solve(self, points, times=None, route="jets"):
        """Return ``(qdd, lam)`` at a batch of chart points."""
        points = _batch(points, self.lagr.space.dim)
        p = self.lagr.parts(points, route)
        _guard_det(p["W"], SingularHessian, points, times)
        if not self.constraint_exprs:
            qdd = np.linalg.solve(p["W"], p["R"][..., None])[..., 0]
            return qdd, np.zeros((points.shape[0], 0))
        c = _constraint_parts(self.lagr, self.constraint_exprs, points, route)
        _, _, qd = self.lagr.split(points)
        mu = c["v"]
        both = np.linalg.solve(p["W"], np.concatenate([p["R"][..., None], np.swapaxes(mu, -1, -2)], axis=-1))
        Winv_R, Winv_muT = both[..., 0], both[..., 1:]
        C = mu @ Winv_muT
        _guard_det(C, SingularConstraintMatrix, points, times)
        drift = np.einsum("bai,bi->ba", c["q"], qd) + c["t"] + np.einsum("bai,bi->ba", mu, Winv_R)
        lam = -np.linalg.solve(C, drift[..., None])[..., 0]
        qdd = Winv_R + np.einsum("bia,ba->bi", Winv_muT, lam)
        return qdd, lam

    def accelerations(self, points, times=None, route="jets"):
        return self.solve(points, times, route)[0]

    def rhs(self, t, x):
        q, qd, _ = self.split_state(x)
        qdd = self.accelerations(self.lagr.point(t, q, qd)[None, :], times=[t], route="symbolic")[0]
        return np.concatenate([qd, qdd])


def nonholonomic_sode(lagr, constraints):
    return NonholonomicSode(lagr, constraints)


class VakonomicSystem(_System):
    """Euler-Lagrange equations of ``L + lam . phi`` closed by the differentiated constraint.

    The state is ``(q, qd, lam)``; the initial multipliers are user input.
    """

    def __init__(self, lagr, constraints):
        self.lagr = lagr
        self.coords = lagr.coords
        self.constraint_exprs = _constraint_list(lagr, constraints)
        self.constraint_space = lagr.space
        self.n_multipliers = len(self.constraint_exprs)

    def _chart_point(self, t, q, qd):
        return self.lagr.point(t, q, qd)

    def solve(self, points, lam, times=None, route="jets"):
        """Return ``(qdd, lam_dot)`` at a batch of chart points and multipliers."""
        points = _batch(points, self.lagr.space.dim)
        lam = np.asarray(lam, dtype=float).reshape(points.shape[0], self.n_multipliers)
        n, m = self.lagr.n, self.n_multipliers
        p = self.lagr.parts(points, route)
        if m == 0:
            _guard_det(p["W"], SingularHessian, points, times)
            qdd = np.linalg.solve(p["W"], p["R"][..., None])[..., 0]
            return qdd, lam
        c = _constraint_parts(self.lagr, self.constraint_exprs, points, route)
        _, _, qd = self.lagr.split(points)
        B = points.shape[0]
        top_left = p["W"] + np.einsum("ba,baij->bij", lam, c["vv"])
        mat = np.zeros((B, n + m, n + m))
        mat[:, :n, :n] = top_left
        mat[:, :n, n:] = np.swapaxes(c["v"], -1, -2)
        mat[:, n:, :n] = c["v"]
        force = c["q"] - np.einsum("baik,bk->bai", c["vq"], qd) - c["vt"]
        rhs = np.concatenate(
            [
                p["R"] + np.einsum("ba,bai->bi", lam, force),
                -np.einsum("bai,bi->ba", c["q"], qd) - c["t"],
            ],
            axis=-1,
        )
        _guard_det(mat, SingularBorderedSystem, points, times)
        sol = np.linalg.solve(mat, rhs[..., None])[..., 0]
        return sol[:, :n], sol[:, n:]

    def rhs(self, t, x):
        q, qd, lam = self.split_state(x)
        qdd, lam_dot = self.solve(self.lagr.point(t, q, qd)[None, :], lam[None, :], times=[t], route="symbolic")
        return np.concatenate([qd, qdd[0], lam_dot[0]])

    def residual(self, points, qdd, lam, lam_dot):
        """Residual of the constrained Euler-Lagrange equations plus the constraints.

        Returns an array ``(batch, n + m)``: the first ``n`` columns are
        ``d/dt(dL/dqd) - dL/dq + lam_dot . dphi/dqd + lam . (d/dt dphi/dqd - dphi/dq)``
        and the last ``m`` are the constraint values.
        """
        points = _batch(points, self.lagr.space.dim)
        B = points.shape[0]
        qdd = np.asarray(qdd, dtype=float).reshape(B, self.lagr.n)
        lam = np.asarray(lam, dtype=float).reshape(B, self.n_multipliers)
        lam_dot = np.asarray(lam_dot, dtype=float).reshape(B, self.n_multipliers)
        el = el_residual(self.lagr, points, qdd)
        if not self.n_multipliers:
            return el
        c = _constraint_parts(self.lagr, self.constraint_exprs, points)
        _, _, qd = self.lagr.split(points)
        ddt_phiv = np.einsum("baij,bj->bai", c["vv"], qdd) + np.einsum("baik,bk->bai", c["vq"], qd) + c["vt"]
        el = el + np.einsum("ba,bai->bi", lam_dot, c["v"]) + np.einsum("ba,bai->bi", lam, ddt_phiv - c["q"])
        return np.concatenate([el, c["phi"]], axis=-1)

    def trajectory_residual(self, traj):
        """Max-norm residual at interior trajectory nodes, derivatives by 5-point stencils."""
        qdd = stencil_derivative(traj.times, traj.qd)
        lam_dot = stencil_derivative(traj.times, traj.lam)
        inner = slice(2, len(traj.times) - 2)
        pts = self.lagr.point(traj.times[inner, None], traj.q[inner], traj.qd[inner])
        res = self.residual(pts, qdd[inner], traj.lam[inner], lam_dot[inner])
        return np.max(np.abs(res), axis=-1)


def vakonomic_system(lagr, constraints):
    return VakonomicSystem(lagr, constraints)


class ConstrainedFlow(_System):
    """Integrates a :class:`~varcheck.bundles.Sode`, possibly on a constraint submanifold.

    The state is ``(q, v)`` with only the free velocities; constrained
    velocities are ``psi`` by construction and are filled in when the
    trajectory is recorded.
    """

    def __init__(self, sode):
        self.sode = sode
        self.coords = sode.coords
        self._gamma = compile_scalars(sode.gamma, sode.space) if sode.gamma else (lambda e: ())
        self._psi = compile_scalars(sode.psi, sode.space) if sode.psi else (lambda e: ())

    def _env(self, t, x):
        return ([float(t)] if self.sode.time_dependent else []) + [float(v) for v in x]

    def initial_state(self, q, v):
        """State from positions and free velocities."""
        return np.concatenate([np.asarray(q, dtype=float), np.asarray(v, dtype=float)])

    def unpack(self, t, x):
        n = self.sode.n
        env = self._env(t, x)
        qd = np.concatenate([x[n:], self._psi(env)])
        return x[:n], qd, None

    def rhs(self, t, x):
        env = self._env(t, x)
        n = self.sode.n
        return np.concatenate([x[n:], self._psi(env), self._gamma(env)])

    def constraint_residuals(self, t, x):
        return np.zeros(0)


# -- integration -------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    coords: tuple
    lam: np.ndarray | None = None
    constraint_residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    truncated: str | None = None

    @property
    def states(self):
        parts = [self.q, self.qd] + ([self.lam] if self.lam is not None else [])
        return np.concatenate(parts, axis=-1)

    @property
    def max_constraint_residual(self):
        r = self.constraint_residuals
        return float(np.max(np.abs(r))) if r.size else 0.0

    def __len__(self):
        return len(self.times)


def integrate(system, x0, t_final, h=1e-3, t0=0.0):
    """Classical fixed-step RK4.

    ``system`` provides ``rhs(t, x)`` and optionally ``constraint_residuals``.
    An evaluation failure ends the run early; the cause is kept in
    ``Trajectory.truncated``.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.array(x0, dtype=float)
    span = float(t_final) - float(t0)
    steps = max(0, int(math.ceil(span / h - 1e-9)))
    times, states, resid = [float(t0)], [x.copy()], [system.constraint_residuals(t0, x)]
    cause = None
    t = float(t0)
    for k in range(steps):
        t_next = float(t_final) if k == steps - 1 else float(t0) + (k + 1) * h
        dt = t_next - t
        try:
            with np.errstate(all="raise"):
                k1 = system.rhs(t, x)
                k2 = system.rhs(t + dt / 2, x + dt / 2 * k1)
                k3 = system.rhs(t + dt / 2, x + dt / 2 * k2)
                k4 = system.rhs(t_next, x + dt * k3)
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                r = system.constraint_residuals(t_next, x)
        except (VarcheckError, ArithmeticError, FloatingPointError) as exc:
            cause = f"stopped at t={t!r}: {exc}"
            break
        t = t_next
        times.append(t)
        states.append(x.copy())
        resid.append(r)
    unpack = getattr(system, "unpack", None)
    if unpack is None:
        n = len(system.coords)
        unpack = lambda _t, s: (s[:n], s[n : 2 * n], None)  # noqa: E731
    pieces = [unpack(tk, s) for tk, s in zip(times, states)]
    lam = None
    if pieces[0][2] is not None and len(pieces[0][2]):
        lam = np.array([p[2] for p in pieces])
    return Trajectory(
        times=np.array(times),
        q=np.array([p[0] for p in pieces]),
        qd=np.array([p[1] for p in pieces]),
        coords=tuple(system.coords),
        lam=lam,
        constraint_residuals=np.array(resid).reshape(len(times), -1),
        truncated=cause,
    )


def stencil_derivative(times, values):
    """Fourth-order finite differences on a uniform grid (one-sided at the ends)."""
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    out = np.full_like(values, np.nan)
    if len(times) < 5:
        return out
    h = np.diff(times)
    # the last step of a run may be shorter; only the uniform part is used
    hh = h[0]
    uni = np.concatenate([[True], np.abs(h - hh) <= 1e-9 * max(1.0, abs(hh))])
    v = values
    out[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * hh)
    mask = np.ones(len(times), dtype=bool)
    for k in range(2, len(times) - 2):
        mask[k] = uni[k - 1] and uni[k] and uni[k + 1] and uni[k + 2]
    out[~mask] = np.nan
    return out


# -- Chaplygin reduction -----------------------------------------------------


class ChaplyginData:
    """Local data of a Chaplygin system in a trivialization ``U x G``.

    ``A[alpha][a]`` are the connection coefficients over the base
    coordinates, ``structure_consts[alpha][beta][gamma]`` the Lie algebra
    structure constants, and ``l`` the reduced Lagrangian in
    ``(r, rd, xi)``.
    """

    def __init__(self, base_coords, A, l, structure_consts=None, xi_names=None, section="chaplygin"):
        self.base_coords = tuple(base_coords)
        self.A = [[as_expr(e) for e in row] for row in A]
        self.group_dim = len(self.A)
        k, nb = self.group_dim, len(self.base_coords)
        for row in self.A:
            if len(row) != nb:
                raise SemanticError(f"connection row has {len(row)} entries, expected {nb}", section=section)
        C = np.zeros((k, k, k)) if structure_consts is None else np.asarray(structure_consts, dtype=float)
        if C.shape != (k, k, k):
            raise SemanticError(f"structure constants must have shape {(k, k, k)}, got {C.shape}", section=section)
        if not np.array_equal(C, -np.swapaxes(C, 1, 2)):
            raise SemanticError("structure constants must be antisymmetric in the lower indices", section=section)
        self.structure_consts = C
        self.xi_names = tuple(xi_names or [f"xi{a + 1}" for a in range(k)])
        self.l = as_expr(l)
        self.base_velocities = tuple(velocity_name(r) for r in self.base_coords)
        self.base_space = VarSpace(self.base_coords)
        self.l_space = VarSpace(self.base_coords + self.base_velocities + self.xi_names)
        for e in [x for row in self.A for x in row]:
            for v in sorted(e.free_vars):
                if v not in self.base_space:
                    raise SemanticError(f"connection depends on {v!r}, not a base coordinate", section=section, name=v)
        for v in sorted(self.l.free_vars):
            if v not in self.l_space:
                raise SemanticError(f"undeclared variable {v!r}", section=section, name=v)

    @property
    def base_dim(self):
        return len(self.base_coords)

    def horizontal_xi(self):
        """``xi^alpha = -A^alpha_a rd^a`` as expressions."""
        out = []
        for row in self.A:
            e = as_expr(0.0)
            for coef, v in zip(row, self.base_velocities):
                e = e - coef * as_expr(v)
            out.append(e)
        return out

    def reduced_lagrangian(self):
        """``L*(r, rd) = l(r, rd, -A rd)`` as a :class:`LagrangianDef`."""
        subs = dict(zip(self.xi_names, self.horizontal_xi()))
        return LagrangianDef(self.l.substitute(subs).simplified(), self.base_coords, time_dependent=False)


def chaplygin_curvature_exprs(d):
    """Curvature coefficients ``B[alpha][a][b]`` as expressions (zero diagonal)."""
    k, nb = d.group_dim, d.base_dim
    C = d.structure_consts
    zero = as_expr(0.0)
    out = [[[zero] * nb for _ in range(nb)] for _ in range(k)]
    for al in range(k):
        for a in range(nb):
            for b in range(a + 1, nb):
                e = d.A[al][a].diff(d.base_coords[b]) - d.A[al][b].diff(d.base_coords[a])
                for be in range(k):
                    for ga in range(k):
                        if C[al, be, ga] != 0.0:
                            e = e - C[al, be, ga] * d.A[be][b] * d.A[ga][a]
                out[al][a][b] = e
                out[al][b][a] = -e
    return out


def chaplygin_curvature(d, r):
    """Curvature coefficients at base point(s) ``r``; shape ``(..., k, nb, nb)``.

    Derivatives of the connection come from jets; each pair ``a < b`` is
    computed once and mirrored so antisymmetry is exact.
    """
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    pts = _batch(r, d.base_dim)
    k, nb = d.group_dim, d.base_dim
    C = d.structure_consts
    Aval = np.zeros((pts.shape[0], k, nb))
    dA = np.zeros((pts.shape[0], k, nb, nb))  # dA[., al, a, b] = dA^al_a / dr^b
    for al in range(k):
        for a in range(nb):
            j = d.A[al][a].eval_jet(d.base_space, pts)
            Aval[:, al, a] = j.value
            dA[:, al, a, :] = j.grad
    out = np.zeros((pts.shape[0], k, nb, nb))
    for a in range(nb):
        for b in range(a + 1, nb):
            val = dA[:, :, a, b] - dA[:, :, b, a] - np.einsum("lbg,pb,pg->pl", C, Aval[:, :, b], Aval[:, :, a])
            out[:, :, a, b] = val
            out[:, :, b, a] = -val
    return out[0] if single else out


def _det_jets(m):
    """Determinant of a small square matrix of jets by cofactor expansion."""
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total = None
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        term = m[0][j] * _det_jets(minor)
        if total is None:
            total = term
        elif j % 2:
            total = total - term
        else:
            total = total + term
    return total


def jet_solve(mat, rhs, points=None, error=SingularHessian):
    """Solve a small linear system whose entries are jets (Cramer's rule).

    Derivatives propagate through the solution, which is what closedness
    checks on implicitly defined vector fields need.
    """
    n = len(rhs)
    if n > 6:
        raise ValueError("jet_solve is meant for systems of size at most 6")
    det = _det_jets(mat)
    vals = np.atleast_1d(det.value)
    scale = np.max([np.max(np.abs(np.atleast_1d(e.value))) for row in mat for e in row] + [1.0]) ** n
    bad = ~(np.abs(vals) >= HESSIAN_THRESHOLD * scale)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise error(float(vals[k]), point=None if points is None else np.atleast_2d(points)[k])
    out = []
    for i in range(n):
        mi = [row[:i] + [rhs[r]] + row[i + 1 :] for r, row in enumerate(mat)]
        out.append(_det_jets(mi) / det)
    return out


class ChaplyginReduced:
    """The reduced second-order system on ``T(Q/G)``.

    Solves ``W* rdd = dL*/dr - d2L*/drd dr . rd + Lambda`` with
    ``Lambda_a = -(dl/dxi^alpha)_c B^alpha_ab rd^b``.
    """

    def __init__(self, d):
        self.data = d
        self.lagr = d.reduced_lagrangian()
        self.coords = d.base_coords
        self.space = self.lagr.space
        subs = dict(zip(d.xi_names, d.horizontal_xi()))
        dl_dxi = [d.l.diff(x).substitute(subs) for x in d.xi_names]
        curv = chaplygin_curvature_exprs(d)
        nb = d.base_dim
        lam = []
        for a in range(nb):
            e = as_expr(0.0)
            for al in range(d.group_dim):
                for b in range(nb):
                    e = e - dl_dxi[al] * curv[al][a][b] * as_expr(d.base_velocities[b])
            lam.append(e)
        self.lambda_exprs = [e.simplified() for e in lam]
        self._force_fn = None
        L = self.lagr.L
        vel = d.base_velocities
        self.hessian_exprs = [[L.diff(vi).diff(vj) for vj in vel] for vi in vel]
        rhs = []
        for a, r in enumerate(d.base_coords):
            e = L.diff(r) + lam[a]
            for b, rb in enumerate(d.base_coords):
                e = e - L.diff(vel[a]).diff(rb) * as_expr(vel[b])
            rhs.append(e)
        self.rhs_exprs = rhs

    def force(self, points):
        """Lambda at a batch of points of ``T(Q/G)``."""
        pts = _batch(points, self.space.dim)
        if self._force_fn is None:
            self._force_fn = compile_scalars(self.lambda_exprs, self.space)
        return np.array([self._force_fn(p.tolist()) for p in pts]).reshape(len(pts), -1)

    def accelerations(self, points, times=None, route="jets"):
        pts = _batch(points, self.space.dim)
        p = self.lagr.parts(pts, route)
        _guard_det(p["W"], SingularHessian, pts, times)
        return np.linalg.solve(p["W"], (p["R"] + self.force(pts))[..., None])[..., 0]

    def gamma_jets(self, points):
        """Accelerations as second-order jets over ``(r, rd)``."""
        pts = _batch(points, self.space.dim)
        W = [[e.eval_jet(self.space, pts) for e in row] for row in self.hessian_exprs]
        b = [e.eval_jet(self.space, pts) for e in self.rhs_exprs]
        return jet_solve(W, b, pts)

    def rhs(self, t, x):
        n = len(self.coords)
        acc = self.accelerations(np.asarray(x)[None, :], times=[t], route="symbolic")[0]
        return np.concatenate([x[n:], acc])

    def constraint_residuals(self, t, x):
        return np.zeros(0)


def chaplygin_reduce(d):
    return ChaplyginReduced(d)


def _sode_gamma_jets(sode):
    space = sode.space

    def fn(pts):
        return [jets.as_jet(e.compile(space)(jets.seed(space, pts)), space.dim, (pts.shape[0],)) for e in sode.gamma]

    return fn


def hamiltonization_residual(reduced, fibermap, samples, tolerance=1e-9):
    """Closedness of ``i_Y omega`` for the pushforward ``Y = F_* Gamma`` on ``T*(Q/G)``.

    ``reduced`` is a :class:`ChaplyginReduced` or an unconstrained autonomous
    :class:`~varcheck.bundles.Sode`.  The 1-form has components
    ``-Y^p`` along ``dr`` and ``Y^r = rd`` along ``dp``; its exterior
    derivative is taken in ``(r, p)`` coordinates through the inverse
    Jacobian of ``F``.
    """
    if isinstance(reduced, Sode):
        if reduced.m or reduced.time_dependent:
            raise SemanticError("hamiltonization needs an autonomous unconstrained system", section="checks")
        space, n, gamma_fn = reduced.space, reduced.n, _sode_gamma_jets(reduced)
    else:
        space, n, gamma_fn = reduced.space, len(reduced.coords), reduced.gamma_jets
    if len(fibermap) != n:
        raise SemanticError(f"fibre map has {len(fibermap)} components, expected {n}", section="fibermap")
    samples = _batch(samples, space.dim)

    def fn(pts):
        B = pts.shape[0]
        x = jets.seed(space, pts)
        rd = x[n:]
        gamma = gamma_fn(pts)
        F = [jets.as_jet(e.compile(space)(x), space.dim, (B,)) for e in fibermap.components]
        jac = np.stack([f.grad for f in F], axis=1)  # dF_a / dx^K, shape (B, n, 2n)
        J = np.zeros((B, 2 * n, 2 * n))
        J[:, :n, :n] = np.eye(n)
        J[:, n:, :] = jac
        _guard_det(J, SingularJacobian, pts)
        # first-order jets of the form components over (r, rd)
        comps = []
        for a in range(n):
            yp = None
            for c in range(n):
                term = F[a].partial(c) * rd[c] + F[a].partial(n + c) * gamma[c]
                yp = term if yp is None else yp + term
            comps.append(-yp)
        comps += [rd[a] + 0.0 for a in range(n)]
        D = np.stack([np.broadcast_to(c.grad, (B, 2 * n)) for c in comps], axis=1)  # D[., I, K] = d comp_I / dx^K
        Jinv = np.linalg.inv(J)  # dx^K / dy^J
        Dy = D @ Jinv  # d comp_I / dy^J
        A = Dy - np.swapaxes(Dy, -1, -2)
        res = np.max(np.abs(A), axis=(-2, -1))
        return {"res": res, "det": np.abs(np.linalg.det(J))}

    out, skipped, reasons, _ = sweep(samples, fn, names=space.names)
    rep = ConditionReport("HAMILTONIZATION", tolerance, samples_skipped=skipped, skip_reasons=reasons)
    if out:
        rep.samples_used = len(out["res"])
        rep.equations["antisymmetric_derivative"] = Stat.of(out["res"])
        rep.require("min_abs_det_dF", float(np.min(out["det"])), 1e-10, ">")
    return rep
