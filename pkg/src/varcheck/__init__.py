"""varcheck: numerical tests for the inverse problem of the calculus of variations.

Covers unconstrained, time-dependent, nonholonomic and holonomic second-order
systems, their Lagrangian extensions and the supporting dynamics.
"""

from .errors import (
    ClosednessError,
    DomainError,
    InputError,
    IsotropyError,
    PreconditionError,
    ProjectionError,
    SemanticError,
    SingularMatrixError,
    TransversalityError,
    VarcheckError,
)
from .expr import Expr, parse
from .jets import Jet2, VarSpace
from .bundles import FiberMap, OneForm, Sode, sigma_immersion
from .helmholtz import (
    ch_conditions,
    helmholtz_classic,
    l_conditions,
    t_conditions,
    tc_conditions,
    holonomic_check,
    cartan_two_form_check,
)
from .mech import LagrangianDef, el_sode, integrate, nonholonomic_sode, vakonomic_system
from .extend import closed_form_extension, flow_extension, reconstruct_lagrangian, verify_extension

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "VarcheckError",
    "InputError",
    "SemanticError",
    "DomainError",
    "SingularMatrixError",
    "PreconditionError",
    "ClosednessError",
    "IsotropyError",
    "TransversalityError",
    "ProjectionError",
    "Expr",
    "parse",
    "Jet2",
    "VarSpace",
    "Sode",
    "FiberMap",
    "OneForm",
    "sigma_immersion",
    "helmholtz_classic",
    "l_conditions",
    "t_conditions",
    "ch_conditions",
    "tc_conditions",
    "holonomic_check",
    "cartan_two_form_check",
    "LagrangianDef",
    "el_sode",
    "nonholonomic_sode",
    "vakonomic_system",
    "integrate",
    "flow_extension",
    "closed_form_extension",
    "reconstruct_lagrangian",
    "verify_extension",
]
