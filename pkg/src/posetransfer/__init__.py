"""Two-branch human pose transfer.

A pose transfer branch re-renders a source person in a target pose and
exposes its deepest feature map as a guidance map; a detail branch turns
a global style code plus that guidance map into a residual detail map.
The final image is the coarse output plus the residual, optionally
blended with a separately generated face patch.
"""

from .errors import (
    AnnotationError,
    ConfigError,
    DimensionError,
    IngestionError,
    NumericError,
    PoseTransferError,
    ProtocolError,
    TrainingDiverged,
)

__all__ = [
    "AnnotationError",
    "ConfigError",
    "DimensionError",
    "IngestionError",
    "NumericError",
    "PoseTransferError",
    "ProtocolError",
    "TrainingDiverged",
]

__version__ = "0.1.0"
