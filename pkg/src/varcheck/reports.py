"""Residual statistics and pass/fail reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SingularMatrixError

__all__ = [
    "Stat",
    "Requirement",
    "ConditionReport",
    "EquationAccumulator",
    "scaled_residual",
    "exact_sum",
    "sweep",
    "LOCAL_VALIDITY_NOTE",
]

LOCAL_VALIDITY_NOTE = (
    "pass means the conditions hold at the sampled points of the declared box; "
    "nothing is claimed outside those points"
)


def _f(x):
    """Plain float for JSON; keeps inf/nan explicit."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class Stat:
    """Max and mean of a residual over samples."""

    max: float
    mean: float
    count: int
    argmax: int = -1

    @classmethod
    def of(cls, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            return cls(0.0, 0.0, 0, -1)
        k = int(np.argmax(values))
        return cls(float(values[k]), float(np.mean(values)), int(values.size), k)

    def merge(self, other):
        count = self.count + other.count
        if count == 0:
            return Stat(0.0, 0.0, 0, -1)
        mean = (self.mean * self.count + other.mean * other.count) / count
        if other.count and (not self.count or other.max > self.max):
            return Stat(other.max, mean, count, other.argmax + self.count)
        return Stat(self.max, mean, count, self.argmax)

    def to_dict(self):
        return {"max": _f(self.max), "mean": _f(self.mean), "count": self.count}


@dataclass
class Requirement:
    """A side condition such as 'min |det g| above threshold'."""

    value: float
    threshold: float
    relation: str  # ">" or ">=" or "==" or "<="
    ok: bool

    def to_dict(self):
        return {"value": _f(self.value), "relation": self.relation, "threshold": _f(self.threshold), "ok": self.ok}


@dataclass
class ConditionReport:
    family: str
    tolerance: float
    equations: dict = field(default_factory=dict)
    samples_used: int = 0
    samples_skipped: int = 0
    skip_reasons: list = field(default_factory=list)
    requirements: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def passed(self):
        if self.samples_used == 0:
            return False
        if any(not r.ok for r in self.requirements.values()):
            return False
        return all(s.max <= self.tolerance for s in self.equations.values())

    def max_residual(self):
        return max((s.max for s in self.equations.values()), default=0.0)

    def require(self, name, value, threshold, relation=">"):
        ops = {
            ">": lambda a, b: a > b,
            ">=": lambda a, b: a >= b,
            "==": lambda a, b: a == b,
            "<=": lambda a, b: a <= b,
        }
        ok = bool(ops[relation](value, threshold))
        self.requirements[name] = Requirement(float(value), float(threshold), relation, ok)
        return ok

    def to_dict(self):
        return {
            "family": self.family,
            "pass": self.passed,
            "tolerance": _f(self.tolerance),
            "samples_used": self.samples_used,
            "samples_skipped": self.samples_skipped,
            "skip_reasons": list(self.skip_reasons),
            "equations": {k: v.to_dict() for k, v in self.equations.items()},
            "requirements": {k: v.to_dict() for k, v in self.requirements.items()},
            "extras": _jsonable(self.extras),
        }

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{k} max={v.max:.3e}" for k, v in self.equations.items()]
        parts += [f"{k}={r.value:.3e}{'' if r.ok else ' (violated)'}" for k, r in self.requirements.items()]
        return f"{self.family}: {status} [{', '.join(parts)}] samples={self.samples_used}"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return _f(x)
    if hasattr(x, "to_dict"):
        return x.to_dict()
    return x


def exact_sum(terms):
    """Correctly rounded per-sample sum of a list of equally shaped arrays."""
    stacked = np.stack([np.broadcast_to(np.asarray(t, dtype=float), np.shape(terms[0])) for t in terms], axis=-1)
    flat = stacked.reshape(-1, stacked.shape[-1])
    out = np.fromiter((math.fsum(row) for row in flat), dtype=float, count=flat.shape[0])
    return out.reshape(stacked.shape[:-1])


def scaled_residual(terms):
    """|sum of terms| / max(1, largest |term|), sample by sample."""
    if not terms:
        return 0.0
    shape = np.broadcast_shapes(*(np.shape(t) for t in terms))
    terms = [np.broadcast_to(np.asarray(t, dtype=float), shape) for t in terms]
    total = exact_sum(terms)
    scale = np.maximum(1.0, np.max(np.abs(np.stack(terms, axis=-1)), axis=-1))
    return np.abs(total) / scale


class EquationAccumulator:
    """Collects per-sample residuals, keeping the worst instance per family."""

    def __init__(self, batch):
        self.batch = batch
        self.values = {}

    def add(self, family, terms):
        r = np.broadcast_to(scaled_residual(terms), (self.batch,))
        self.add_raw(family, r)

    def add_raw(self, family, residual):
        residual = np.broadcast_to(np.asarray(residual, dtype=float), (self.batch,))
        residual = np.where(np.isnan(residual), np.inf, residual)
        prev = self.values.get(family)
        self.values[family] = residual.copy() if prev is None else np.maximum(prev, residual)

    def declare(self, family):
        self.values.setdefault(family, np.zeros(self.batch))


_SKIPPABLE = (DomainError, SingularMatrixError, ZeroDivisionError, FloatingPointError)


def sweep(points, fn, names=None):
    """Run ``fn`` on the whole batch, falling back to point-by-point on failure.

    ``fn(batch)`` returns a dict of name -> per-sample arrays.  Returns the
    concatenated dict over the points that evaluated, the number skipped and
    up to five distinct skip reasons.  Domain errors are annotated with the
    failing point when ``names`` is given.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with np.errstate(all="ignore"):
        try:
            out = fn(points)
            return {k: np.asarray(v) for k, v in out.items()}, 0, [], np.arange(len(points))
        except _SKIPPABLE:
            pass
        pieces, kept, reasons, skipped = [], [], [], 0
        for i, p in enumerate(points):
            try:
                pieces.append(fn(p[None, :]))
                kept.append(i)
            except _SKIPPABLE as exc:
                skipped += 1
                if isinstance(exc, DomainError) and names is not None:
                    exc = exc.at({n: float(v) for n, v in zip(names, p)})
                msg = str(exc)
                if len(reasons) < 5 and msg not in reasons:
                    reasons.append(msg)
    if not pieces:
        return {}, skipped, reasons, np.array([], dtype=int)
    keys = pieces[0].keys()
    merged = {k: np.concatenate([np.atleast_1d(np.asarray(pc[k])) for pc in pieces], axis=0) for k in keys}
    return merged, skipped, reasons, np.asarray(kept)
