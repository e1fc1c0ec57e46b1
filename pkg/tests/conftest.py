import numpy as np
import pytest

from varcheck.jets import VarSpace

XYZ = VarSpace(["x", "y", "z"])

# Thirty expressions over (x, y, z), all smooth on the sampling box
# x, y in [0.5, 1.5], z in [-1, 1].
EXPRESSION_CORPUS = [
    "x + y + z",
    "x*y*z",
    "x^2 - y^2 + 3*z",
    "x^3*y - 2*z^2",
    "x/y",
    "(x + z)/(1 + y^2)",
    "sin(x)*cos(y)",
    "tan(z/2)",
    "exp(x*z)",
    "ln(x + y)",
    "sqrt(x*y)",
    "sqrt(1 + z^2)",
    "abs(x - 3)",
    "x^y",
    "pow(x, z)",
    "2^x",
    "x^-2",
    "x^0.5*y^1.5",
    "-x^2 + z",
    "-(x - y)^2/2",
    "sin(x*y + z)^2",
    "cos(exp(z))*x",
    "exp(-x^2 - y^2)",
    "ln(x)*ln(y)",
    "x*sin(1/x)",
    "1/(x^2 + y^2 + z^2)",
    "sqrt(1 + x^2)*y/x",
    "(x*y - z)^3",
    "tan(x/3) + z*exp(y)",
    "x*y^2 + cos(z)*sin(y)*x^2",
]


def box_points(rng, count):
    lo = np.array([0.5, 0.5, -1.0])
    hi = np.array([1.5, 1.5, 1.0])
    return lo + (hi - lo) * rng.random((count, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
