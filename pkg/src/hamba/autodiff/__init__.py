from . import ops
from .gradcheck import GradCheckReport, check_function, finite_diff_check
from .tensor import (
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    no_record,
)

__all__ = [
    "GradCheckReport",
    "NonFiniteError",
    "ParamStore",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "backward",
    "check_function",
    "finite_diff_check",
    "no_record",
    "ops",
]
