from . import ops
from .checkpoint import CheckpointError
from .gradcheck import finite_difference_gradient, max_relative_error
from .ops import apply_primitive
from .optim import AdamWState, LrSchedule, adamw_update, cosine_warmup_lr
from .tensor import (
    Graph,
    NumericDomainError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "AdamWState",
    "CheckpointError",
    "Graph",
    "LrSchedule",
    "NumericDomainError",
    "ShapeError",
    "Tensor",
    "adamw_update",
    "apply_primitive",
    "backward",
    "cosine_warmup_lr",
    "default_dtype",
    "finite_difference_gradient",
    "max_relative_error",
    "no_grad",
    "ops",
    "precision",
]
