"""The expression language: a recursive-descent parser, an immutable AST and
an evaluator that works on floats, arrays or :class:`~varcheck.jets.Jet2`.

Grammar (precedence from loose to tight)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

So ``^`` is right-associative and binds tighter than unary minus:
``-x^2`` is ``-(x^2)`` and ``2^-1`` is ``0.5``.  Implicit multiplication
(``2x``) is rejected.  Guards are a single comparison ``expr OP expr`` with
``OP`` one of ``<  <=  >  >=``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import jets
from .errors import DomainError, InputError, VarcheckError

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "Expr",
    "Guard",
    "ParseError",
    "UnboundVariableError",
    "parse",
    "parse_guard",
    "as_expr",
    "RESERVED",
    "compile_scalars",
]

RESERVED = frozenset(jets.FUNCTIONS)


class ParseError(InputError):
    """Malformed expression text.

    ``offset`` counts UTF-8 bytes from the start of the source; ``line`` and
    ``column`` are 1-based (column in characters).
    """

    def __init__(self, message, source, index, expected=()):
        self.source = source
        self.index = index
        self.offset = len(source[:index].encode("utf-8"))
        self.line = source.count("\n", 0, index) + 1
        self.column = index - (source.rfind("\n", 0, index) + 1) + 1
        self.reason = message
        self.expected = frozenset(expected)
        text = f"{message} at line {self.line}, column {self.column}"
        if self.expected:
            text += " (expected " + ", ".join(sorted(self.expected)) + ")"
        super().__init__(text)


class UnboundVariableError(VarcheckError, KeyError):
    def __init__(self, name, available=()):
        self.name = name
        self.available = tuple(available)
        super().__init__(name)

    def __str__(self):
        return f"variable {self.name!r} is not bound (available: {', '.join(self.available) or 'none'})"


# -- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    child: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


# -- tokenizer --------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|[-+*/^(),<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # number, ident, op, end
    text: str
    index: int


def _tokenize(source):
    out = []
    i = 0
    n = len(source)
    while i < n:
        m = _TOKEN.match(source, i)
        if m is None:
            raise ParseError(f"unexpected character {source[i]!r}", source, i)
        kind = m.lastgroup
        if kind != "ws":
            if kind == "number" and m.end() < n and (source[m.end()].isalpha() or source[m.end()] == "_"):
                raise ParseError(
                    "implicit multiplication is not allowed; write '*'", source, m.end(), {"operator"}
                )
            out.append(_Tok(kind, m.group(), i))
        i = m.end()
    out.append(_Tok("end", "", n))
    return out


_ATOM_START = {"number", "identifier", "'('", "'-'"}


class _Parser:
    def __init__(self, source):
        self.source = source
        self.toks = _tokenize(source)
        self.pos = 0

    @property
    def tok(self):
        return self.toks[self.pos]

    def advance(self):
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def error(self, message, expected=()):
        raise ParseError(message, self.source, self.tok.index, expected)

    def at_op(self, *ops):
        return self.tok.kind == "op" and self.tok.text in ops

    def expect_op(self, op):
        if not self.at_op(op):
            self.error(f"expected '{op}' but found {self._describe()}", {f"'{op}'"})
        return self.advance()

    def _describe(self):
        t = self.tok
        return "end of input" if t.kind == "end" else repr(t.text)

    # expr := term (('+' | '-') term)*
    def expr(self):
        node = self.term()
        while self.at_op("+", "-"):
            op = self.advance().text
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.at_op("*", "/"):
            op = self.advance().text
            node = Binary(op, node, self.factor())
        return node

    def factor(self):
        if self.at_op("-"):
            self.advance()
            return Unary("-", self.factor())
        return self.power()

    def power(self):
        base = self.atom()
        if self.at_op("^"):
            self.advance()
            return Binary("^", base, self.factor())
        return base

    def atom(self):
        t = self.tok
        if t.kind == "number":
            self.advance()
            return Const(float(t.text))
        if t.kind == "ident":
            self.advance()
            if self.at_op("("):
                return self.call(t)
            if t.text in RESERVED:
                self.error(f"function {t.text!r} needs an argument list", {"'('"})
            return Var(t.text)
        if self.at_op("("):
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        self.error(f"unexpected {self._describe()}", _ATOM_START)

    def call(self, name_tok):
        name = name_tok.text
        if name not in RESERVED:
            raise ParseError(
                f"unknown function {name!r}", self.source, name_tok.index, {"one of " + "/".join(sorted(RESERVED))}
            )
        self.expect_op("(")
        args = [self.expr()]
        while self.at_op(","):
            self.advance()
            args.append(self.expr())
        self.expect_op(")")
        arity = jets.FUNCTIONS[name][1]
        if len(args) != arity:
            raise ParseError(
                f"{name} takes {arity} argument{'s' if arity > 1 else ''}, got {len(args)}",
                self.source,
                name_tok.index,
            )
        return Call(name, tuple(args))

    def finish(self, what="operator or end of input"):
        if self.tok.kind != "end":
            self.error(f"unexpected {self._describe()}", {what})


def parse(source):
    """Parse expression text into an :class:`Expr`."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    p = _Parser(source)
    root = p.expr()
    p.finish()
    return Expr(root, source)


# -- printing ---------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_number(v):
    if math.isfinite(v) and v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def _pretty(node):
    if isinstance(node, Const):
        text = _fmt_number(node.value)
        return f"({text})" if node.value < 0 or text.startswith("-") else text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(_pretty(a) for a in node.args) + ")"
    if isinstance(node, Unary):
        child = _pretty(node.child)
        if isinstance(node.child, Binary) and node.child.op in _PREC:
            child = f"({child})"
        return "-" + child
    if node.op == "^":
        base = _pretty(node.left)
        if isinstance(node.left, (Binary, Unary)):
            base = f"({base})"
        exp = _pretty(node.right)
        if isinstance(node.right, Binary) and node.right.op in _PREC:
            exp = f"({exp})"
        return f"{base}^{exp}"
    prec = _PREC[node.op]
    left = _pretty(node.left)
    if isinstance(node.left, Binary) and node.left.op in _PREC and _PREC[node.left.op] < prec:
        left = f"({left})"
    right = _pretty(node.right)
    if isinstance(node.right, Binary) and node.right.op in _PREC and _PREC[node.right.op] <= prec:
        right = f"({right})"
    elif prec == 1 and isinstance(node.right, Unary):
        # "a - -b" reparses fine, but "a--b" reads badly
        return f"{left} {node.op} {right}"
    sep = " " if prec == 1 else ""
    return f"{left}{sep}{node.op}{sep}{right}"


# -- evaluation -------------------------------------------------------------


def _pow(a, b):
    if isinstance(b, jets.Jet2):
        return jets.general_power(a, b)
    if isinstance(a, jets.Jet2):
        return jets.power(a, b)
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        return jets.power(a, float(b))
    return jets.general_power(a, b)


def _divide(a, b):
    if isinstance(a, jets.Jet2) or isinstance(b, jets.Jet2):
        return a / b
    b_arr = np.asarray(b)
    if not np.all(b_arr != 0):
        raise DomainError("division", 0.0)
    return a / b


_BINARY = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _divide,
    "^": _pow,
}


def _compile(node, index):
    if isinstance(node, Const):
        v = float(node.value)
        return lambda env: v
    if isinstance(node, Var):
        k = index[node.name]
        return lambda env: env[k]
    if isinstance(node, Unary):
        child = _compile(node.child, index)
        return lambda env: -child(env)
    if isinstance(node, Binary):
        f = _BINARY[node.op]
        left, right = _compile(node.left, index), _compile(node.right, index)
        return lambda env: f(left(env), right(env))
    fn = jets.FUNCTIONS[node.func][0]
    args = [_compile(a, index) for a in node.args]
    if len(args) == 1:
        (a0,) = args
        return lambda env: fn(a0(env))
    return lambda env: fn(*(a(env) for a in args))


def _free(node, acc):
    if isinstance(node, Var):
        acc.add(node.name)
    elif isinstance(node, Unary):
        _free(node.child, acc)
    elif isinstance(node, Binary):
        _free(node.left, acc)
        _free(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _free(a, acc)
    return acc


def _subst(node, mapping):
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Unary):
        return Unary(node.op, _subst(node.child, mapping))
    if isinstance(node, Binary):
        return Binary(node.op, _subst(node.left, mapping), _subst(node.right, mapping))
    if isinstance(node, Call):
        return Call(node.func, tuple(_subst(a, mapping) for a in node.args))
    return node



# -- symbolic differentiation -----------------------------------------------

_ZERO, _ONE = Const(0.0), Const(1.0)


def _is(node, v):
    return isinstance(node, Const) and node.value == v


def _neg(a):
    if isinstance(a, Const):
        return Const(0.0) if a.value == 0 else Unary("-", a)
    if isinstance(a, Unary):
        return a.child
    return Unary("-", a)


def _add(a, b):
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(b, Unary):
        return _sub(a, b.child)
    return Binary("+", a, b)


def _sub(a, b):
    if _is(b, 0):
        return a
    if _is(a, 0):
        return _neg(b)
    if isinstance(b, Unary):
        return _add(a, b.child)
    return Binary("-", a, b)


def _mul(a, b):
    if _is(a, 0) or _is(b, 0):
        return _ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if isinstance(a, Unary):
        return _neg(_mul(a.child, b))
    if isinstance(b, Unary):
        return _neg(_mul(a, b.child))
    return Binary("*", a, b)


def _div(a, b):
    if _is(a, 0):
        return _ZERO
    if _is(b, 1):
        return a
    return Binary("/", a, b)


def _num(v):
    return Const(float(v)) if v >= 0 else Unary("-", Const(float(-v)))


def _power(a, b):
    if _is(b, 1):
        return a
    if _is(b, 0):
        return _ONE
    return Binary("^", a, b)


def _const_value(node):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Unary) and isinstance(node.child, Const):
        return -node.child.value
    return None


def _d(node, x):
    if isinstance(node, Const):
        return _ZERO
    if isinstance(node, Var):
        return _ONE if node.name == x else _ZERO
    if x not in _free(node, set()):
        return _ZERO
    if isinstance(node, Unary):
        return _neg(_d(node.child, x))
    if isinstance(node, Binary):
        a, b = node.left, node.right
        if node.op == "+":
            return _add(_d(a, x), _d(b, x))
        if node.op == "-":
            return _sub(_d(a, x), _d(b, x))
        if node.op == "*":
            return _add(_mul(_d(a, x), b), _mul(a, _d(b, x)))
        if node.op == "/":
            return _sub(_div(_d(a, x), b), _div(_mul(a, _d(b, x)), _power(b, Const(2.0))))
        return _d_power(a, b, x)
    if node.func == "pow":
        return _d_power(node.args[0], node.args[1], x)
    (a,) = node.args
    da = _d(a, x)
    f = node.func
    if f == "sin":
        outer = Call("cos", (a,))
    elif f == "cos":
        outer = _neg(Call("sin", (a,)))
    elif f == "tan":
        outer = _add(_ONE, _power(node, Const(2.0)))
    elif f == "exp":
        outer = node
    elif f == "ln":
        return _div(da, a)
    elif f == "sqrt":
        return _div(da, _mul(Const(2.0), node))
    else:  # abs
        outer = _div(node, a)
    return _mul(outer, da)


def _d_power(a, b, x):
    da = _d(a, x)
    if x not in _free(b, set()):
        c = _const_value(b)
        if c is not None:
            return _mul(_mul(_num(c), _power(a, _num(c - 1.0))), da)
        return _mul(_mul(b, _power(a, _sub(b, _ONE))), da)
    db = _d(b, x)
    inner = _add(_mul(db, Call("ln", (a,))), _div(_mul(b, da), a))
    return _mul(Binary("^", a, b), inner)



# -- scalar code generation ---------------------------------------------------
#
# Integrators evaluate the same few expressions millions of times at single
# points.  Generating one Python function for a whole list of expressions
# avoids the per-node closure overhead; domain rules match the float route of
# the jet evaluator.


def _s_pow(a, b):
    p = float(b)
    if p.is_integer():
        if p < 0 and a == 0:
            raise DomainError("pow", a)
        return a ** int(p)
    if (p > 2 and a < 0) or (p <= 2 and a <= 0):
        raise DomainError("pow", a)
    return a**p


def _s_ln(a):
    if not a > 0:
        raise DomainError("ln", a)
    return math.log(a)


def _s_sqrt(a):
    if not a >= 0:
        raise DomainError("sqrt", a)
    return math.sqrt(a)


def _s_div(a, b):
    if b == 0:
        raise DomainError("division", 0.0)
    return a / b


def _s_exp(a):
    try:
        return math.exp(a)
    except OverflowError:
        raise DomainError("exp", a) from None


_S_FUNCS = {
    "sin": "_m.sin",
    "cos": "_m.cos",
    "tan": "_m.tan",
    "exp": "_s_exp",
    "ln": "_s_ln",
    "sqrt": "_s_sqrt",
    "abs": "abs",
    "pow": "_s_pow",
}


def _codegen(node, index):
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return f"e[{index[node.name]}]"
    if isinstance(node, Unary):
        return f"(-{_codegen(node.child, index)})"
    if isinstance(node, Binary):
        a, b = _codegen(node.left, index), _codegen(node.right, index)
        if node.op == "/":
            return f"_s_div({a}, {b})"
        if node.op == "^":
            return f"_s_pow({a}, {b})"
        return f"({a} {node.op} {b})"
    args = ", ".join(_codegen(a, index) for a in node.args)
    return f"{_S_FUNCS[node.func]}({args})"


def compile_scalars(exprs, names):
    """One fast function ``f(values) -> tuple of floats`` for a list of expressions.

    ``values`` is a sequence of floats ordered like ``names``.
    """
    names = tuple(names.names) if hasattr(names, "names") else tuple(names)
    index = {n: i for i, n in enumerate(names)}
    exprs = [as_expr(x) for x in exprs]
    for x in exprs:
        for name in sorted(x.free_vars):
            if name not in index:
                raise UnboundVariableError(name, names)
    body = ", ".join(_codegen(x.root, index) for x in exprs)
    scope = {"_m": math, "_s_pow": _s_pow, "_s_ln": _s_ln, "_s_sqrt": _s_sqrt, "_s_div": _s_div, "_s_exp": _s_exp}
    exec(f"def _generated(e):\n    return ({body}{',' if len(exprs) == 1 else ''})\n", scope)
    return scope["_generated"]


def _simplify(node):
    """Bottom-up constant folding and removal of neutral elements."""
    if isinstance(node, Unary):
        return _neg(_simplify(node.child))
    if isinstance(node, Call):
        return Call(node.func, tuple(_simplify(a) for a in node.args))
    if not isinstance(node, Binary):
        return node
    a, b = _simplify(node.left), _simplify(node.right)
    ca, cb = _const_value(a), _const_value(b)
    if ca is not None and cb is not None and node.op in "+-*":
        return _num({"+": ca + cb, "-": ca - cb, "*": ca * cb}[node.op])
    if node.op == "+":
        return _add(a, b)
    if node.op == "-":
        return _sub(a, b)
    if node.op == "*":
        return _mul(a, b)
    if node.op == "/":
        return _div(a, b)
    return _power(a, b)


def as_expr(x):
    """Coerce a number, string or Expr into an Expr."""
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return parse(x)
    if isinstance(x, (int, float, np.floating, np.integer)):
        v = float(x)
        return Expr(Const(v) if v >= 0 else Unary("-", Const(-v)))
    raise TypeError(f"cannot make an expression from {type(x).__name__}")


class Expr:
    """An immutable parsed expression."""

    __slots__ = ("root", "source", "_free", "_compiled")

    def __init__(self, root, source=None):
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "_free", None)
        object.__setattr__(self, "_compiled", {})

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    @property
    def free_vars(self):
        if self._free is None:
            object.__setattr__(self, "_free", frozenset(_free(self.root, set())))
        return self._free

    def compile(self, space):
        """A function of a sequence of per-variable values (floats, arrays or jets)."""
        key = tuple(space.names) if hasattr(space, "names") else tuple(space)
        fn = self._compiled.get(key)
        if fn is None:
            index = {n: i for i, n in enumerate(key)}
            for name in sorted(self.free_vars):
                if name not in index:
                    raise UnboundVariableError(name, key)
            fn = _compile(self.root, index)
            self._compiled[key] = fn
        return fn

    def eval_jet(self, space, point):
        """Value, gradient and Hessian at ``point`` (shape (dim,) or (batch, dim))."""
        fn = self.compile(space)
        seeds = jets.seed(space, point)
        out = fn(seeds)
        return jets.as_jet(out, space.dim, np.shape(np.asarray(point))[:-1])

    def value(self, space, point):
        point = np.asarray(point, dtype=float)
        fn = self.compile(space)
        cols = [point[..., i] for i in range(point.shape[-1])]
        out = fn(cols)
        return np.broadcast_to(np.asarray(out, dtype=float), point.shape[:-1]) * 1.0

    def evaluate(self, **env):
        """Evaluate on keyword-bound numbers, e.g. ``e.evaluate(x=1.0)``."""
        names = tuple(sorted(self.free_vars))
        missing = [n for n in names if n not in env]
        if missing:
            raise UnboundVariableError(missing[0], tuple(env))
        fn = self.compile(names)
        return fn([env[n] for n in names])

    def pretty(self):
        return _pretty(self.root)

    def substitute(self, mapping):
        """Replace variables by expressions (strings and numbers are coerced)."""
        roots = {k: as_expr(v).root for k, v in mapping.items()}
        return Expr(_subst(self.root, roots))

    def diff(self, name):
        """Symbolic partial derivative with respect to the variable ``name``."""
        return Expr(_simplify(_d(self.root, name)))

    def simplified(self):
        return Expr(_simplify(self.root))

    def rename(self, mapping):
        return self.substitute({k: Expr(Var(v)) for k, v in mapping.items()})

    def __eq__(self, other):
        return isinstance(other, Expr) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    def __repr__(self):
        return f"Expr({self.pretty()!r})"

    def __str__(self):
        return self.pretty()

    def _bin(self, op, other, swap=False):
        other = as_expr(other)
        a, b = (other, self) if swap else (self, other)
        return Expr(Binary(op, a.root, b.root))

    def __add__(self, o):
        return self._bin("+", o)

    def __radd__(self, o):
        return self._bin("+", o, True)

    def __sub__(self, o):
        return self._bin("-", o)

    def __rsub__(self, o):
        return self._bin("-", o, True)

    def __mul__(self, o):
        return self._bin("*", o)

    def __rmul__(self, o):
        return self._bin("*", o, True)

    def __truediv__(self, o):
        return self._bin("/", o)

    def __rtruediv__(self, o):
        return self._bin("/", o, True)

    def __pow__(self, o):
        return self._bin("^", o)

    def __neg__(self):
        return Expr(Unary("-", self.root))


_CMP = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}


@dataclass(frozen=True)
class Guard:
    """A boolean comparison of two expressions, used to exclude singular regions."""

    left: Expr
    op: str
    right: Expr
    source: str = ""

    @property
    def free_vars(self):
        return self.left.free_vars | self.right.free_vars

    def holds(self, space, points):
        """Boolean mask over a batch of points; evaluation failures count as False."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(all="ignore"):
            try:
                a = self.left.value(space, points)
                b = self.right.value(space, points)
            except ArithmeticError:
                return np.array([self._holds_one(space, p) for p in points])
        return _CMP[self.op](a, b)

    def _holds_one(self, space, point):
        try:
            return bool(_CMP[self.op](self.left.value(space, point), self.right.value(space, point)))
        except ArithmeticError:
            return False

    def pretty(self):
        return f"{self.left.pretty()} {self.op} {self.right.pretty()}"


def parse_guard(source):
    """Parse ``expr OP expr`` with OP in < <= > >=."""
    p = _Parser(source)
    left = p.expr()
    if not (p.tok.kind == "op" and p.tok.text in _CMP):
        p.error(f"expected a comparison but found {p._describe()}", {"'<'", "'<='", "'>'", "'>='"})
    op = p.advance().text
    right = p.expr()
    p.finish()
    return Guard(Expr(left), op, Expr(right), source)
