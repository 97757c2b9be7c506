"""Tensor core: immutable arrays, explicit tape, counter-based RNG."""

from . import ops
from .gradcheck import finite_diff_check, finite_diff_errors, sample_coords
from .rng import Stream
from .tensor import (
    GradientMap,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    checked_enabled,
    default_dtype,
    set_checked,
    unchecked,
    using_dtype,
)

__all__ = [
    "GradientMap",
    "NonFiniteError",
    "ShapeError",
    "Stream",
    "Tape",
    "Tensor",
    "as_tensor",
    "checked_enabled",
    "default_dtype",
    "finite_diff_check",
    "finite_diff_errors",
    "ops",
    "sample_coords",
    "set_checked",
    "unchecked",
    "using_dtype",
]
