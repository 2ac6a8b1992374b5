"""ACC-UNet on a small numpy autodiff engine."""

from accunet.tensor import (
    DegenerateBatchError,
    DivisibilityError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateBatchError",
    "DivisibilityError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
]
