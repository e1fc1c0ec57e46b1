"""Second-order forward-mode differentiation.

A :class:`Jet2` carries a value with its gradient and Hessian relative to an
ordered :class:`VarSpace`.  Values are either scalars or 1-d batches; for a
batch of ``B`` points the gradient has shape ``(B, dim)`` and the Hessian
``(B, dim, dim)``.  Every rule below builds the Hessian from symmetric pieces
(scaled Hessians and symmetrised outer products), so it is symmetric
bit-for-bit, not merely up to roundoff.

Taking a partial derivative of a jet (:meth:`Jet2.partial`) yields a jet
that only knows its value and gradient.  Arithmetic on such jets propagates
gradients but asking for their Hessian raises, since that would need third
derivatives.
"""

from __future__ import annotations

import numpy as np

from .errors import DerivativeOrderError, DomainError

__all__ = [
    "VarSpace",
    "Jet2",
    "seed",
    "constant",
    "as_jet",
    "sin",
    "cos",
    "tan",
    "exp",
    "ln",
    "sqrt",
    "absolute",
    "power",
    "FUNCTIONS",
    "fd_oracle",
    "is_symmetric",
    "general_power",
    "pow_function",
]


class VarSpace:
    """An ordered list of distinct variable names."""

    __slots__ = ("names", "_index")

    def __init__(self, names=()):
        names = tuple(names)
        seen = set()
        for name in names:
            if not isinstance(name, str) or not name:
                raise TypeError(f"variable names must be non-empty strings, got {name!r}")
            if name in seen:
                raise ValueError(f"duplicate variable {name!r}")
            seen.add(name)
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def dim(self):
        return len(self.names)

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def extend(self, more):
        return VarSpace(self.names + tuple(more))

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other):
        return isinstance(other, VarSpace) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"VarSpace({list(self.names)})"


def _col(v):
    return np.asarray(v)[..., None]


def _mat(v):
    return np.asarray(v)[..., None, None]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _sym_outer(a, b):
    # (i, j) and (j, i) hold the same two products summed in swapped order;
    # float addition is commutative, so the result is exactly symmetric.
    return _outer(a, b) + _outer(b, a)


def _is_const(x):
    return isinstance(x, (int, float, np.floating, np.integer, np.ndarray))


class Jet2:
    """Value, gradient and (optionally) Hessian of a scalar function."""

    __slots__ = ("value", "grad", "_hess")
    __array_ufunc__ = None  # make ndarray (op) Jet2 defer to Jet2's reflected ops

    def __init__(self, value, grad, hess=None):
        self.value = value
        self.grad = grad
        self._hess = hess

    @property
    def hess(self):
        if self._hess is None:
            raise DerivativeOrderError(
                "this jet is a first derivative of a second-order jet; "
                "its Hessian would need third derivatives"
            )
        return self._hess

    @property
    def order(self):
        return 1 if self._hess is None else 2

    @property
    def dim(self):
        return self.grad.shape[-1]

    @property
    def batch_shape(self):
        return np.shape(self.value)

    def partial(self, k):
        """The jet of the partial derivative with respect to variable ``k``."""
        hess = self.hess
        return Jet2(self.grad[..., k], hess[..., k, :], None)

    def __repr__(self):
        return f"Jet2(value={self.value!r}, grad={self.grad!r}, hess={self._hess!r})"

    # -- arithmetic ---------------------------------------------------------

    def _scaled(self, c):
        c = np.asarray(c, dtype=float)
        hess = None if self._hess is None else _mat(c) * self._hess
        return Jet2(self.value * c, _col(c) * self.grad, hess)

    def _shifted(self, c):
        return Jet2(self.value + np.asarray(c, dtype=float), self.grad, self._hess)

    def __add__(self, other):
        if isinstance(other, Jet2):
            hess = None
            if self._hess is not None and other._hess is not None:
                hess = self._hess + other._hess
            return Jet2(self.value + other.value, self.grad + other.grad, hess)
        if _is_const(other):
            return self._shifted(other)
        return NotImplemented

    __radd__ = __add__

    def __neg__(self):
        hess = None if self._hess is None else -self._hess
        return Jet2(-self.value, -self.grad, hess)

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, Jet2):
            hess = None
            if self._hess is not None and other._hess is not None:
                hess = self._hess - other._hess
            return Jet2(self.value - other.value, self.grad - other.grad, hess)
        if _is_const(other):
            return self._shifted(-np.asarray(other, dtype=float))
        return NotImplemented

    def __rsub__(self, other):
        if _is_const(other):
            return (-self)._shifted(other)
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, Jet2):
            av, bv = self.value, other.value
            grad = _col(av) * other.grad + _col(bv) * self.grad
            hess = None
            if self._hess is not None and other._hess is not None:
                hess = (
                    _mat(av) * other._hess
                    + _mat(bv) * self._hess
                    + _sym_outer(self.grad, other.grad)
                )
            return Jet2(av * bv, grad, hess)
        if _is_const(other):
            return self._scaled(other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return _divide(self, other)
        if _is_const(other):
            c = np.asarray(other, dtype=float)
            _check(c != 0, "division", c)
            return self._scaled(1.0 / c)
        return NotImplemented

    def __rtruediv__(self, other):
        if _is_const(other):
            return _divide(constant(other, self.dim, self.batch_shape), self)
        return NotImplemented

    def __pow__(self, other):
        if isinstance(other, Jet2):
            return general_power(self, other)
        if _is_const(other):
            return power(self, other)
        return NotImplemented

    def __rpow__(self, other):
        if _is_const(other):
            return general_power(constant(other, self.dim, self.batch_shape), self)
        return NotImplemented


def _check(ok, op, arg):
    """Raise DomainError unless ``ok`` holds everywhere in the batch."""
    ok = np.asarray(ok)
    if ok.all():
        return
    arg = np.asarray(arg)
    idx = np.argwhere(~ok)[0] if ok.ndim else ()
    bad = arg[tuple(idx)] if arg.ndim else arg
    raise DomainError(op, float(bad))


def _divide(a, b):
    bv = b.value
    _check(bv != 0, "division", bv)
    value = a.value / bv
    grad = (a.grad - _col(value) * b.grad) / _col(bv)
    hess = None
    if a._hess is not None and b._hess is not None:
        hess = (a._hess - _mat(value) * b._hess - _sym_outer(grad, b.grad)) / _mat(bv)
    return Jet2(value, grad, hess)


def _chain(x, f0, f1, f2):
    """Compose a scalar function with known derivatives f0, f1, f2 at x."""
    grad = _col(f1) * x.grad
    hess = None
    if x._hess is not None:
        hess = _mat(f1) * x._hess + _mat(f2) * _outer(x.grad, x.grad)
    return Jet2(f0, grad, hess)


def constant(value, dim, batch_shape=()):
    """A jet with zero derivatives."""
    value = np.broadcast_to(np.asarray(value, dtype=float), batch_shape)
    if batch_shape == ():
        value = np.float64(value)
    return Jet2(
        value,
        np.zeros(tuple(batch_shape) + (dim,)),
        np.zeros(tuple(batch_shape) + (dim, dim)),
    )


def as_jet(x, dim, batch_shape=()):
    """Promote numbers to constant jets; jets pass through."""
    if isinstance(x, Jet2):
        return x
    return constant(x, dim, batch_shape)


def seed(space, point):
    """One jet per variable: value from ``point``, unit gradient, zero Hessian.

    ``point`` has shape ``(dim,)`` or ``(batch, dim)``.
    """
    dim = space.dim
    point = np.asarray(point, dtype=float)
    if point.shape[-1:] != (dim,) or point.ndim > 2:
        raise ValueError(f"point shape {point.shape} does not match space of dimension {dim}")
    batch = point.shape[:-1]
    eye = np.eye(dim)
    zero_h = np.broadcast_to(np.zeros((dim, dim)), batch + (dim, dim))
    jets = []
    for i in range(dim):
        grad = np.broadcast_to(eye[i], batch + (dim,))
        value = point[..., i] if batch else np.float64(point[i])
        jets.append(Jet2(value, grad, zero_h))
    return jets


# -- elementary functions ---------------------------------------------------
#
# Each accepts a Jet2, a float or an ndarray, so one compiled expression can be
# evaluated on plain numbers or on jets.


def sin(x):
    if isinstance(x, Jet2):
        s, c = np.sin(x.value), np.cos(x.value)
        return _chain(x, s, c, -s)
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet2):
        s, c = np.sin(x.value), np.cos(x.value)
        return _chain(x, c, -s, -c)
    return np.cos(x)


def tan(x):
    v = x.value if isinstance(x, Jet2) else x
    _check(np.cos(v) != 0, "tan", v)
    if isinstance(x, Jet2):
        t = np.tan(v)
        d1 = 1.0 + t * t
        return _chain(x, t, d1, 2.0 * t * d1)
    return np.tan(x)


def exp(x):
    if isinstance(x, Jet2):
        e = np.exp(x.value)
        return _chain(x, e, e, e)
    return np.exp(x)


def ln(x):
    v = x.value if isinstance(x, Jet2) else x
    _check(np.asarray(v) > 0, "ln", v)
    if isinstance(x, Jet2):
        inv = 1.0 / v
        return _chain(x, np.log(v), inv, -inv * inv)
    return np.log(x)


def sqrt(x):
    v = x.value if isinstance(x, Jet2) else x
    if isinstance(x, Jet2):
        _check(np.asarray(v) > 0, "sqrt", v)
        r = np.sqrt(v)
        return _chain(x, r, 0.5 / r, -0.25 / (r * v))
    _check(np.asarray(v) >= 0, "sqrt", v)
    return np.sqrt(x)


def absolute(x):
    v = x.value if isinstance(x, Jet2) else x
    if isinstance(x, Jet2):
        _check(np.asarray(v) != 0, "abs", v)
        sgn = np.sign(v)
        return _chain(x, np.abs(v), sgn, np.zeros_like(sgn))
    return np.abs(x)


def power(x, p):
    """``x ** p`` for a constant real exponent ``p``."""
    p = float(p)
    v = x.value if isinstance(x, Jet2) else np.asarray(x, dtype=float)
    integral = p.is_integer()
    if integral and p >= 0:
        pass
    elif integral:
        _check(np.asarray(v) != 0, "pow", v)
    elif p > 2:
        _check(np.asarray(v) >= 0, "pow", v)
    else:
        _check(np.asarray(v) > 0, "pow", v)
    if not isinstance(x, Jet2):
        if integral:
            return np.asarray(v) ** int(p) if np.ndim(v) else float(v) ** int(p)
        return np.power(v, p)
    if p == 0:
        return constant(1.0, x.dim, x.batch_shape)
    if p == 1:
        return x
    if integral:
        k = int(p)
        f0 = v**k
        f1 = k * v ** (k - 1)
        f2 = k * (k - 1) * v ** (k - 2) if k != 1 else np.zeros_like(v)
    else:
        f0 = np.power(v, p)
        f1 = p * np.power(v, p - 1)
        f2 = p * (p - 1) * np.power(v, p - 2)
    return _chain(x, f0, f1, f2)


def general_power(x, y):
    """``x ** y`` with a variable exponent, via exp(y ln x); needs x > 0."""
    if not isinstance(y, Jet2):
        if np.ndim(y) == 0:
            return power(x, y)
        if isinstance(x, Jet2):
            return exp(np.asarray(y, dtype=float) * ln(x))
        # plain numbers with a batch of exponents
        _check(np.asarray(x) > 0, "pow", x)
        return np.power(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if not isinstance(x, Jet2):
        _check(np.asarray(x) > 0, "pow", x)
        return exp(y * float(np.log(x))) if np.ndim(x) == 0 else exp(y * np.log(x))
    return exp(y * ln(x))


def pow_function(x, y):
    """The two-argument ``pow`` of the expression language."""
    if isinstance(y, Jet2) or np.ndim(y) > 0:
        return general_power(x, y)
    return power(x, y)


FUNCTIONS = {
    "sin": (sin, 1),
    "cos": (cos, 1),
    "tan": (tan, 1),
    "exp": (exp, 1),
    "ln": (ln, 1),
    "sqrt": (sqrt, 1),
    "abs": (absolute, 1),
    "pow": (pow_function, 2),
}


def fd_oracle(f, space, point, h=1e-4):
    """Central-difference gradient and Hessian of ``f`` at ``point``.

    ``f`` is either something with a ``value(space, point)`` method (an
    :class:`~varcheck.expr.Expr`) or a plain callable of the point vector.
    Independent of the jet rules; used to cross-check them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if hasattr(f, "value"):
        fn = lambda p: float(f.value(space, p))  # noqa: E731
    else:
        fn = lambda p: float(f(p))  # noqa: E731
    x = np.asarray(point, dtype=float)
    if x.shape != (space.dim,):
        raise ValueError("point does not match the space")
    d = space.dim
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    f0 = fn(x)
    eye = np.eye(d) * h
    for i in range(d):
        fp, fm = fn(x + eye[i]), fn(x - eye[i])
        grad[i] = (fp - fm) / (2 * h)
        hess[i, i] = (fp - 2 * f0 + fm) / (h * h)
        for j in range(i):
            fpp = fn(x + eye[i] + eye[j])
            fpm = fn(x + eye[i] - eye[j])
            fmp = fn(x - eye[i] + eye[j])
            fmm = fn(x - eye[i] - eye[j])
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return grad, hess


def is_symmetric(hess):
    """Bit-exact symmetry check over the last two axes."""
    return bool(np.array_equal(hess, np.swapaxes(hess, -1, -2)))

