"""Desk-scale semantic scene completion from depth: voxel grids, spatial
transforms with graph fusion, geometry-aware voxelization, deformable
attention, losses with checked gradients, and evaluation metrics."""
from .errors import (BehindCameraError, ConfigError, FormatError, InvalidArgumentError, InvariantError,
                     OptimizationError, SingularTransformError, SSCError)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "ConfigError", "FormatError", "InvalidArgumentError", "InvariantError",
    "OptimizationError", "SingularTransformError", "SSCError", "__version__",
]
