"""3D ResNet engine with staged transfer learning on volumetric data."""

from age2hie.tensor import (
    ComputationRecord,
    RecordError,
    ShapeError,
    Tensor,
    backward,
    recording,
)

__version__ = "0.1.0"

__all__ = [
    "ComputationRecord",
    "RecordError",
    "ShapeError",
    "Tensor",
    "backward",
    "recording",
    "__version__",
]
