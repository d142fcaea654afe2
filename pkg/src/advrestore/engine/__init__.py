"""Minimal reverse-mode tensor engine over numpy."""
from .tensor import (
    Graph,
    NonFiniteError,
    Tensor,
    backward,
    debug_mode,
    get_default_dtype,
    no_grad,
    parameters_checksum,
    set_default_dtype,
)
from .functional import ShapeError
from .gradcheck import check_gradient, finite_difference_gradient, relative_error
from . import functional

__all__ = [
    "Graph",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "check_gradient",
    "debug_mode",
    "finite_difference_gradient",
    "functional",
    "get_default_dtype",
    "no_grad",
    "parameters_checksum",
    "relative_error",
    "set_default_dtype",
]
