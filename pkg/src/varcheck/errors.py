"""Exception hierarchy shared by every layer of the package."""


class VarcheckError(Exception):
    """Base class for all errors raised by varcheck."""


class InputError(VarcheckError):
    """Malformed or inconsistent user input (exit code 2 at the CLI)."""


class SemanticError(InputError):
    """A well-formed input that refers to something undeclared or mis-sized."""

    def __init__(self, message, *, section=None, name=None):
        self.section = section
        self.name = name
        if section:
            message = f"[{section}] {message}"
        super().__init__(message)


class DomainError(VarcheckError, ArithmeticError):
    """An elementary function was evaluated outside its differentiable domain."""

    def __init__(self, op, value, where=None):
        self.op = op
        self.value = value
        self.where = dict(where or {})
        super().__init__(self._render())

    def _render(self):
        msg = f"{self.op} is undefined at argument {self.value!r}"
        if self.where:
            at = ", ".join(f"{k}={v!r}" for k, v in self.where.items())
            msg += f" (at {at})"
        return msg

    def at(self, where):
        """Return a copy annotated with the variable values of the failing point."""
        return DomainError(self.op, self.value, where)


class DerivativeOrderError(VarcheckError):
    """Derivative information beyond what a jet carries was requested."""


class SingularMatrixError(VarcheckError):
    """A linear solve was refused because the matrix is numerically singular."""

    kind = "matrix"

    def __init__(self, det, *, point=None, time=None):
        self.det = det
        self.point = point
        self.time = time
        where = ""
        if time is not None:
            where += f" at t={time!r}"
        if point is not None:
            where += f" at state {list(map(float, point))}"
        super().__init__(f"singular {self.kind} (|det| = {abs(det):.3e}){where}")


class SingularHessian(SingularMatrixError):
    kind = "velocity Hessian"


class SingularConstraintMatrix(SingularMatrixError):
    kind = "constraint matrix"


class SingularBorderedSystem(SingularMatrixError):
    kind = "bordered vakonomic system"


class SingularJacobian(SingularMatrixError):
    kind = "fibre Jacobian"


class PreconditionError(VarcheckError):
    """A documented precondition of an operation does not hold on the input."""


class ClosednessError(PreconditionError):
    """A 1-form required to be closed is not (within tolerance)."""


class IsotropyError(PreconditionError):
    """A submanifold required to be isotropic is not (within tolerance)."""


class TransversalityError(PreconditionError):
    """Hamiltonian vector fields fail to be transverse to the submanifold."""


class ProjectionError(PreconditionError):
    """The extended submanifold is not a graph over the requested region."""
