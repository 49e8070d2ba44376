"""Convolutional fully recursive perceptron networks."""

from ._core import (
    CheckpointError,
    ConfigError,
    DataError,
    Model,
    NumericError,
    ShapeError,
    __version__,
    conv2d,
    count_parameters,
    gradcheck,
    match_width,
    params_table,
    scalar_recursion,
    synth_shapes,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "ShapeError",
    "__version__",
    "conv2d",
    "count_parameters",
    "gradcheck",
    "match_width",
    "params_table",
    "scalar_recursion",
    "synth_shapes",
    "train",
]
