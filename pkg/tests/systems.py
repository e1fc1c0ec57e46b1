"""Generators shared by the test modules."""

import numpy as np

from varcheck.bundles import FiberMap, Sode
from varcheck.mech import LagrangianDef


def _num(v):
    return f"({float(v)!r})"


def random_quadratic_system(seed, n=None):
    """SODE of L = qd'M qd/2 + qd'A q - q'K q/2 with random M > 0, A, K = K'.

    Returns (sode, legendre_fibermap, lagrangian).
    """
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 4))
    B = rng.normal(size=(n, n))
    M = B @ B.T + n * np.eye(n)
    A = rng.normal(size=(n, n))
    K = rng.normal(size=(n, n))
    K = (K + K.T) / 2
    q = [f"q{i + 1}" for i in range(n)]
    qd = [f"q{i + 1}d" for i in range(n)]
    terms = []
    for i in range(n):
        for j in range(n):
            terms.append(f"{_num(M[i, j] / 2)}*{qd[i]}*{qd[j]}")
            terms.append(f"{_num(A[i, j])}*{qd[i]}*{q[j]}")
            terms.append(f"{_num(-K[i, j] / 2)}*{q[i]}*{q[j]}")
    lagr = LagrangianDef(" + ".join(terms), q)
    # M qdd = (A' - A) qd - K q
    Minv = np.linalg.inv(M)
    C = Minv @ (A.T - A)
    D = -Minv @ K
    gamma = [
        " + ".join([f"{_num(C[i, j])}*{qd[j]}" for j in range(n)] + [f"{_num(D[i, j])}*{q[j]}" for j in range(n)])
        for i in range(n)
    ]
    return Sode(q, gamma), lagr.legendre(), lagr


def perturb(F, sode, scale=0.1):
    """Break variationality: add scale * q1 * q1d to the first momentum."""
    q, v = sode.coords[0], sode.velocities[0]
    return F.perturbed(0, f"{scale!r}*{q}*{v}")


def uniform(rng, count, dim, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, (count, dim))


__all__ = ["random_quadratic_system", "perturb", "uniform", "FiberMap"]
