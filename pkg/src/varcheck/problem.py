"""Problem files: a small sectioned text format describing a mechanical system.

See ``docs/problem-format.md`` for the grammar.  :func:`load_problem`
returns a fully validated :class:`Problem`.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundles import FiberMap, Sode, velocity_name
from .errors import InputError, SemanticError
from .expr import Expr, Guard, ParseError, as_expr, parse, parse_guard
from .mech import ChaplyginData, LagrangianDef

__all__ = ["FORMAT_VERSION", "Problem", "Value", "ProblemSyntaxError", "load_problem", "parse_problem", "SECTIONS", "DEFAULTS"]

# version of the problem-file grammar; files may declare it with `format = 1` in [space]
FORMAT_VERSION = 1

SECTIONS = ("space", "sode", "constraints", "fibermap", "lagrangian", "chaplygin", "sampling", "checks")

DEFAULTS = {
    "tolerance": 1e-9,
    "trajectory_tolerance": 1e-6,
    "samples": 64,
    "h": 1e-3,
    "seed": 0,
    "box": [-1.0, 1.0],
}


class ProblemSyntaxError(InputError):
    """Malformed problem text, with 1-based line and column."""

    def __init__(self, message, line=None, column=None, path=None):
        self.message, self.line, self.column, self.path = message, line, column, path
        where = [str(path)] if path else []
        if line is not None:
            where.append(f"line {line}" + (f", column {column}" if column is not None else ""))
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)


@dataclass
class Value:
    """Raw right-hand side of ``key = value`` with its source position."""

    text: str
    line: int
    column: int
    section: str

    def _fail(self, msg):
        raise ProblemSyntaxError(f"[{self.section}] {msg}", self.line, self.column)

    def expr(self, params=None):
        try:
            e = parse(self.text)
        except ParseError as exc:
            raise ProblemSyntaxError(f"[{self.section}] {exc.reason}", self.line, self.column + exc.column - 1) from exc
        return e.substitute(params) if params else e

    def items(self):
        """Top-level comma-separated entries, brackets stripped once."""
        text = self.text.strip()
        if text.startswith("[") and text.endswith("]"):
            text = text[1:-1]
        return _split_top(text)

    def names(self):
        out = [s.strip() for s in self.items() if s.strip()]
        for s in out:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", s):
                self._fail(f"{s!r} is not a valid name")
        return out

    def exprs(self, params=None):
        return [Value(s.strip(), self.line, self.column, self.section).expr(params) for s in self.items() if s.strip()]

    def number(self):
        e = self.expr()
        if e.free_vars:
            self._fail(f"expected a number, got {self.text!r}")
        return float(e.evaluate())

    def _tree(self, text):
        text = text.strip()
        if text.startswith("[") and text.endswith("]"):
            return [self._tree(s) for s in _split_top(text[1:-1]) if s.strip()]
        return text

    def nested(self):
        """Nested lists of entry strings, e.g. ``[[a, b], [c, d]]``."""
        return self._tree(self.text)

    def numbers(self):
        def conv(x):
            if isinstance(x, list):
                return [conv(v) for v in x]
            return Value(x, self.line, self.column, self.section).number()

        out = conv(self.nested())
        return out if isinstance(out, list) else [out]

    def matrix_exprs(self, params=None):
        def conv(x):
            if isinstance(x, list):
                return [conv(v) for v in x]
            return Value(x, self.line, self.column, self.section).expr(params)

        return conv(self.nested())


def _split_top(text):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


@dataclass
class Problem:
    name: str
    source_hash: str
    coords: tuple
    sode: Sode | None = None
    fibermaps: dict = field(default_factory=dict)
    lagrangian: LagrangianDef | None = None
    constrained_lagrangian: Expr | None = None
    extension_lagrangian: Expr | None = None
    nh_constraints: list = field(default_factory=list)
    chaplygin: ChaplyginData | None = None
    ambient: tuple | None = None
    params: dict = field(default_factory=dict)
    box: dict = field(default_factory=dict)
    guards: list = field(default_factory=list)
    samples: int = DEFAULTS["samples"]
    seed: int = DEFAULTS["seed"]
    checks: list = field(default_factory=list)
    options: dict = field(default_factory=dict)
    tolerance: float = DEFAULTS["tolerance"]

    @property
    def n(self):
        return len(self.coords)

    @property
    def m(self):
        return self.sode.m if self.sode else 0

    def fibermap(self, name=None):
        if not self.fibermaps:
            raise SemanticError("no fibre map declared", section="fibermap")
        if name is None:
            return next(iter(self.fibermaps.values()))
        if name not in self.fibermaps:
            raise SemanticError(
                f"unknown fibre map {name!r} (declared: {', '.join(self.fibermaps)})", section="fibermap", name=name
            )
        return self.fibermaps[name]

    def option(self, check, key, default=None):
        return self.options.get(check, {}).get(key, default)

    def interval(self, name):
        return self.box.get(name, DEFAULTS["box"])

    def draw_samples(self, space, count=None, seed=None, exclude_guards=False):
        """Deterministic uniform samples in the box, filtered by guards.

        Guards whose variables are not all in ``space`` are ignored.
        """
        count = self.samples if count is None else count
        rng = np.random.default_rng(self.seed if seed is None else seed)
        names = list(space.names)
        lo = np.array([self.interval(v)[0] for v in names], dtype=float)
        hi = np.array([self.interval(v)[1] for v in names], dtype=float)
        guards = [] if exclude_guards else [g for g in self.guards if g.free_vars <= set(names)]
        out, drawn = [], 0
        while sum(len(o) for o in out) < count:
            if drawn > 200 * count:
                raise SemanticError(
                    f"guards reject almost every point of the sampling box ({drawn} draws)", section="sampling"
                )
            pts = lo + (hi - lo) * rng.random((count, len(names)))
            drawn += count
            keep = np.ones(count, dtype=bool)
            for g in guards:
                keep &= g.holds(space, pts)
            out.append(pts[keep])
        return np.concatenate(out)[:count]


_HEADER = re.compile(r"^\[\s*([A-Za-z_]+)(?:\s+([A-Za-z_][A-Za-z0-9_]*))?\s*\]$")
_KEY = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*)\s*=(.*)$")


def _lex(text):
    """Yield (section, label, key, Value, header_line) entries; list values may span lines."""
    section, label = None, None
    lines = text.splitlines()
    i = 0
    entries, headers = [], []
    while i < len(lines):
        raw = lines[i].split("#", 1)[0].rstrip()
        lineno = i + 1
        i += 1
        if not raw.strip():
            continue
        stripped = raw.strip()
        if stripped.startswith("["):
            m = _HEADER.match(stripped)
            if not m or m.group(1) not in SECTIONS:
                raise ProblemSyntaxError(
                    f"unknown section header {stripped!r} (sections: {', '.join(SECTIONS)})", lineno, 1
                )
            section, label = m.group(1), m.group(2)
            headers.append((section, label, lineno))
            continue
        m = _KEY.match(stripped)
        if not m:
            raise ProblemSyntaxError("expected 'key = value'", lineno, len(raw) - len(raw.lstrip()) + 1)
        if section is None:
            raise ProblemSyntaxError("entry outside of any section", lineno, 1)
        key, value = m.group(1), m.group(2)
        col = raw.index("=") + 2 + (len(value) - len(value.lstrip()))
        value = value.strip()
        depth = value.count("[") - value.count("]")
        while depth > 0 and i < len(lines):
            more = lines[i].split("#", 1)[0].strip()
            i += 1
            value += " " + more
            depth = value.count("[") - value.count("]")
        if depth:
            raise ProblemSyntaxError("unbalanced brackets", lineno, col)
        if not value:
            raise ProblemSyntaxError(f"empty value for {key!r}", lineno, col)
        entries.append((section, label, key, Value(value, lineno, col, section)))
    return entries, headers


def parse_problem(text, name="problem"):
    entries, headers = _lex(text)
    present = {h[0] for h in headers}
    if "space" not in present:
        raise SemanticError("missing [space] section", section="space")
    by_section = {}
    for section, label, key, value in entries:
        by_section.setdefault((section, label), {})
        bucket = by_section[(section, label)]
        if key in bucket:
            raise ProblemSyntaxError(f"[{section}] duplicate key {key!r}", value.line, 1)
        bucket[key] = value

    space = by_section.get(("space", None), {})
    if "coords" not in space:
        raise SemanticError("missing 'coords' entry", section="space")
    declared = space["coords"].names()
    if len(set(declared)) != len(declared):
        raise SemanticError("duplicate coordinate names", section="space")
    params = {}
    for key, val in space.items():
        if key.startswith("param."):
            params[key[6:]] = val.number()
        elif key == "format":
            if val.number() != FORMAT_VERSION:
                raise SemanticError(
                    f"unsupported format version {val.text} (this reader understands {FORMAT_VERSION})", section="space"
                )
        elif key not in ("coords", "ambient", "time"):
            raise SemanticError(f"unknown key {key!r}", section="space", name=key)
    time = space["time"].names()[0] if "time" in space else "t"

    cons = by_section.get(("constraints", None), {})
    constrained = list(cons)
    for q in constrained:
        if q not in declared:
            raise SemanticError(f"constraint for undeclared coordinate {q!r}", section="constraints", name=q)
    coords = tuple([q for q in declared if q not in constrained] + constrained)
    prob = Problem(name=name, source_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(), coords=coords)
    prob.params = params
    if "ambient" in space:
        prob.ambient = tuple(space["ambient"].names())

    sode_sec = by_section.get(("sode", None))
    if sode_sec is not None:
        free = coords[: len(coords) - len(constrained)]
        for key in sode_sec:
            if key not in free:
                raise SemanticError(
                    f"{key!r} is not a free coordinate (free: {', '.join(free)})", section="sode", name=key
                )
        missing = [q for q in free if q not in sode_sec]
        if missing:
            raise SemanticError(f"missing acceleration for {missing[0]!r}", section="sode", name=missing[0])
        gamma = [sode_sec[q].expr(params) for q in free]
        psi = [cons[q].expr(params) for q in constrained]
        prob.sode = Sode(coords, gamma, psi, time=time)
    elif constrained:
        raise SemanticError("[constraints] needs a [sode] section", section="constraints")

    fm_coords = prob.ambient or coords
    for section, label, _ in headers:
        if section != "fibermap":
            continue
        sec = by_section.get(("fibermap", label), {})
        fname = label or f"F{len(prob.fibermaps) + 1}"
        if fname in prob.fibermaps:
            raise SemanticError(f"duplicate fibre map {fname!r}", section="fibermap", name=fname)
        for key in sec:
            if key not in fm_coords:
                raise SemanticError(f"component for undeclared coordinate {key!r}", section="fibermap", name=key)
        missing = [q for q in fm_coords if q not in sec]
        if missing:
            raise SemanticError(f"fibre map {fname!r} misses component {missing[0]!r}", section="fibermap")
        F = FiberMap([sec[q].expr(params) for q in fm_coords], fname)
        if prob.sode is not None and prob.ambient is None:
            F.check(prob.sode)
        prob.fibermaps[fname] = F

    lag = by_section.get(("lagrangian", None), {})
    for key in lag:
        if key not in ("L", "l", "L_bar", "constraints"):
            raise SemanticError(f"unknown key {key!r}", section="lagrangian", name=key)
    lag_coords = prob.ambient or coords
    if "L" in lag:
        prob.lagrangian = LagrangianDef(lag["L"].expr(params), lag_coords, time=time)
    if "l" in lag:
        prob.constrained_lagrangian = lag["l"].expr(params)
        if prob.sode is not None:
            for v in sorted(prob.constrained_lagrangian.free_vars):
                if v not in prob.sode.space:
                    raise SemanticError(f"undeclared variable {v!r}", section="lagrangian", name=v)
    if "L_bar" in lag:
        prob.extension_lagrangian = lag["L_bar"].expr(params)
        LagrangianDef(prob.extension_lagrangian, lag_coords, time=time)
    if "constraints" in lag:
        prob.nh_constraints = lag["constraints"].exprs(params)
    elif prob.sode is not None and prob.sode.m:
        prob.nh_constraints = [as_expr(velocity_name(q)) - p for q, p in zip(prob.sode.constrained, prob.sode.psi)]
    if prob.lagrangian is not None:
        for e in prob.nh_constraints:
            for v in sorted(e.free_vars):
                if v not in prob.lagrangian.space:
                    raise SemanticError(f"undeclared variable {v!r}", section="lagrangian", name=v)

    ch = by_section.get(("chaplygin", None))
    if ch is not None:
        for key in ("base", "A", "l"):
            if key not in ch:
                raise SemanticError(f"missing {key!r} entry", section="chaplygin")
        structure = ch["structure"].numbers() if "structure" in ch else None
        xi = ch["xi"].names() if "xi" in ch else None
        prob.chaplygin = ChaplyginData(
            ch["base"].names(), ch["A"].matrix_exprs(params), ch["l"].expr(params), structure, xi
        )

    samp = by_section.get(("sampling", None), {})
    for key, val in samp.items():
        if key == "samples":
            prob.samples = int(val.number())
            if prob.samples < 1:
                raise SemanticError("samples must be positive", section="sampling")
        elif key == "seed":
            prob.seed = int(val.number())
        elif key == "tolerance":
            prob.tolerance = val.number()
        elif key.startswith("guard"):
            try:
                g = parse_guard(val.text)
            except ParseError as exc:
                raise ProblemSyntaxError(f"[sampling] {exc.reason}", val.line, val.column + exc.column - 1) from exc
            prob.guards.append(Guard(g.left.substitute(params), g.op, g.right.substitute(params), g.source))
        else:
            interval = val.numbers()
            if len(interval) != 2 or not interval[0] < interval[1]:
                raise SemanticError(f"box entry {key!r} must be [low, high] with low < high", section="sampling")
            prob.box[key] = interval

    from .checks import CHECKS, validate_options

    chk = by_section.get(("checks", None), {})
    if "run" in chk:
        prob.checks = chk["run"].names()
        for c in prob.checks:
            if c not in CHECKS:
                raise SemanticError(f"unknown check {c!r} (available: {', '.join(sorted(CHECKS))})", section="checks", name=c)
    for key, val in chk.items():
        if key == "run":
            continue
        if "." not in key:
            raise SemanticError(f"option {key!r} must be written check.option", section="checks", name=key)
        cname, opt = key.split(".", 1)
        if cname not in CHECKS:
            raise SemanticError(f"option for unknown check {cname!r}", section="checks", name=cname)
        prob.options.setdefault(cname, {})[opt] = val
    validate_options(prob)
    return prob


def load_problem(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 text") from exc
    try:
        return parse_problem(text, name=path.stem)
    except ProblemSyntaxError as exc:
        raise ProblemSyntaxError(exc.message, exc.line, exc.column, path) from exc
