"""Masked conditional diffusion for self-supervised video frame interpolation."""

from mivid.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MetricError,
    MividError,
    NumericError,
    ShapeError,
    StepError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "MetricError",
    "MividError",
    "NumericError",
    "ShapeError",
    "StepError",
    "__version__",
]
