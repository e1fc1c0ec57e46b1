"""Running the checks of a problem and writing reports and trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .checks import CheckContext, run_check
from .errors import InputError, SemanticError
from .problem import DEFAULTS, FORMAT_VERSION, parse_problem
from .reports import LOCAL_VALIDITY_NOTE, _jsonable

__all__ = [
    "SCHEMA",
    "RunReport",
    "CheckOutcome",
    "run_checks",
    "run_example",
    "corpus_names",
    "load_example",
    "trajectory_csv",
    "write_trajectory_csv",
    "simulate",
]

SCHEMA = "varcheck.report/1"


def _version():
    from . import __version__

    return __version__


@dataclass
class CheckOutcome:
    name: str
    reports: list
    info: list = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self):
        return self.error is None and bool(self.reports) and all(r.passed for r in self.reports)

    def to_dict(self):
        return {
            "check": self.name,
            "pass": self.passed,
            "error": self.error,
            "reports": [r.to_dict() for r in self.reports],
            "info": [r.to_dict() for r in self.info],
        }


@dataclass
class RunReport:
    problem: str
    input_sha256: str
    seed: int
    settings: dict
    outcomes: list = field(default_factory=list)
    trajectories: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.outcomes) and all(o.passed for o in self.outcomes)

    @property
    def exit_code(self):
        return 0 if self.passed else 1

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "tool": {"name": "varcheck", "version": _version()},
            "problem": self.problem,
            "problem_format": FORMAT_VERSION,
            "input_sha256": self.input_sha256,
            "seed": self.seed,
            "settings": _jsonable(self.settings),
            "defaults": _jsonable(DEFAULTS),
            "pass": self.passed,
            "checks": [o.to_dict() for o in self.outcomes],
            "note": LOCAL_VALIDITY_NOTE,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"

    def summary_lines(self):
        lines = [f"{self.problem}: {'PASS' if self.passed else 'FAIL'} (seed {self.seed})"]
        for o in self.outcomes:
            lines.append(f"  {o.name}: {'PASS' if o.passed else 'FAIL'}")
            if o.error:
                lines.append(f"    error: {o.error}")
            for r in o.reports:
                lines.append("    " + r.summary())
        return lines


def run_checks(problem, tolerance=None, samples=None, seed=None, h=None, trajectory_tolerance=None, checks=None):
    """Run the problem's checks in declaration order; failures are recorded, not raised.

    ``tolerance`` (the jet tolerance) and ``samples`` override the values in
    the problem file; per-check ``tol`` options still take precedence.
    """
    settings = {
        "tolerance": problem.tolerance if tolerance is None else float(tolerance),
        "trajectory_tolerance": DEFAULTS["trajectory_tolerance"] if trajectory_tolerance is None else float(trajectory_tolerance),
        "samples": problem.samples if samples is None else int(samples),
        "h": DEFAULTS["h"] if h is None else float(h),
    }
    seed = problem.seed if seed is None else int(seed)
    ctx = CheckContext(
        problem,
        settings["tolerance"],
        settings["trajectory_tolerance"],
        settings["h"],
        settings["samples"],
        seed,
    )
    report = RunReport(problem.name, problem.source_hash, seed, settings)
    names = problem.checks if checks is None else list(checks)
    if not names:
        raise SemanticError("no checks requested (add 'run = ...' to [checks])", section="checks")
    for name in names:
        reports, info, error = run_check(name, ctx)
        report.outcomes.append(CheckOutcome(name, reports, info, error))
    report.trajectories = dict(ctx.trajectories)
    for traj in report.trajectories.values():
        # uniform CSV layout: constraint residuals for every run in the full chart
        if problem.nh_constraints and traj.constraint_residuals.size == 0 and tuple(traj.coords) == tuple(problem.coords):
            traj.constraint_residuals = _constraint_columns(problem, traj)
    return report


# -- corpus ------------------------------------------------------------------


def _corpus_dir():
    return resources.files("varcheck") / "corpus"


def corpus_names():
    return sorted(p.name[: -len(".problem")] for p in _corpus_dir().iterdir() if p.name.endswith(".problem"))


def load_example(name):
    names = corpus_names()
    if name not in names:
        raise InputError(f"unknown example {name!r}; available: {', '.join(names)}")
    text = (_corpus_dir() / f"{name}.problem").read_text(encoding="utf-8")
    return parse_problem(text, name=name)


def run_example(name, **kwargs):
    return run_checks(load_example(name), **kwargs)


# -- trajectories ------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def trajectory_csv(traj, constraint_labels=True):
    """CSV text with header ``t,q1..qn,qd1..qdn[,phi1..phim]``."""
    n = traj.q.shape[1]
    m = traj.constraint_residuals.shape[1] if traj.constraint_residuals is not None else 0
    header = ["t"] + [f"q{i + 1}" for i in range(n)] + [f"qd{i + 1}" for i in range(n)]
    if constraint_labels:
        header += [f"phi{a + 1}" for a in range(m)]
    rows = [",".join(header)]
    for k in range(len(traj.times)):
        vals = [traj.times[k]] + list(traj.q[k]) + list(traj.qd[k])
        if constraint_labels and m:
            vals += list(traj.constraint_residuals[k])
        rows.append(",".join(_fmt(v) for v in vals))
    return "\n".join(rows) + "\n"


def write_trajectory_csv(traj, path):
    Path(path).write_text(trajectory_csv(traj), encoding="utf-8")


def simulate(problem, x0, t_final, h=None, system="auto"):
    """Integrate the problem's dynamics.

    ``system`` selects ``sode`` (the declared SODE on M), ``euler_lagrange``
    (of [lagrangian] L), ``nonholonomic`` (L with the constraints) or
    ``auto``: the SODE if declared, else Euler-Lagrange.  For ``sode`` the
    initial state is on M, ``(q, free velocities)``; for the others it is
    ``(q, qd)``.  Constraint residuals ``qd_c - psi`` are recorded when
    constraints exist.
    """
    from .mech import ConstrainedFlow, el_sode, integrate, nonholonomic_sode

    h = DEFAULTS["h"] if h is None else float(h)
    x0 = np.asarray(x0, dtype=float)
    if system == "auto":
        system = "sode" if problem.sode is not None else "euler_lagrange"
    if system == "sode":
        sode = problem.sode
        if sode is None:
            raise SemanticError("simulation needs a [sode] section", section="sode")
        k = sode.n - sode.m
        if x0.shape != (sode.n + k,):
            raise InputError(f"initial state needs {sode.n + k} entries (q, free velocities), got {x0.size}")
        flow = ConstrainedFlow(sode)
        traj = integrate(flow, x0, t_final, h)
        if sode.m:
            # satisfied by construction; recorded so the CSV layout is uniform
            traj.constraint_residuals = _constraint_columns(problem, traj)
        return traj
    lagr = problem.lagrangian
    if lagr is None:
        raise SemanticError("simulation needs 'L' in [lagrangian]", section="lagrangian")
    if x0.shape != (2 * lagr.n,):
        raise InputError(f"initial state needs {2 * lagr.n} entries (q, qd), got {x0.size}")
    if system == "euler_lagrange":
        traj = integrate(el_sode(lagr), x0, t_final, h)
        if problem.nh_constraints:
            traj.constraint_residuals = _constraint_columns(problem, traj)
        return traj
    if system == "nonholonomic":
        return integrate(nonholonomic_sode(lagr, problem.nh_constraints), x0, t_final, h)
    raise InputError(f"unknown system {system!r}")


def _constraint_columns(problem, traj):
    from .jets import VarSpace
    from .bundles import velocity_name

    coords = traj.coords
    names = list(coords) + [velocity_name(q) for q in coords]
    space = VarSpace((["t"] if any("t" in e.free_vars for e in problem.nh_constraints) else []) + names)
    pts = np.concatenate([traj.q, traj.qd], -1)
    if "t" in space.names and space.names[0] == "t":
        pts = np.concatenate([traj.times[:, None], pts], -1)
    if not problem.nh_constraints:
        return np.zeros((len(traj.times), 0))
    return np.stack([e.value(space, pts) for e in problem.nh_constraints], -1)
