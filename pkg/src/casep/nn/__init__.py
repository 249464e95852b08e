"""Dense-numerics substrate: tape autodiff, 2D/3D layers, Adam, FD checks."""

from casep.nn.adam import AdamState, NumericError, adam_step
from casep.nn.gradcheck import GradCheckReport, finite_difference_check
from casep.nn.layers import (
    MlpSpec,
    init_identity,
    init_random,
    linear_forward,
    mlp,
    mlp_forward,
    per_style_linear_forward,
)
from casep.nn.tape import Node, ShapeError, Tape, TapeError

__all__ = [
    "AdamState", "NumericError", "adam_step", "GradCheckReport", "finite_difference_check",
    "MlpSpec", "init_identity", "init_random", "linear_forward", "mlp", "mlp_forward",
    "per_style_linear_forward", "Node", "ShapeError", "Tape", "TapeError",
]
