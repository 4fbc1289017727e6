from heart_surrogate.errors import (
    CalibrationError,
    ConfigurationError,
    DatasetError,
    DivergenceError,
    HeartSurrogateError,
    InputShapeError,
    ParameterShapeError,
)
from heart_surrogate.lnode import LnodeModel, Trajectory, integrate, load_checkpoint
from heart_surrogate.parameters import ParameterSpace, ParameterSpec

__all__ = [
    'CalibrationError',
    'ConfigurationError',
    'DatasetError',
    'DivergenceError',
    'HeartSurrogateError',
    'InputShapeError',
    'LnodeModel',
    'ParameterShapeError',
    'ParameterSpace',
    'ParameterSpec',
    'Trajectory',
    'integrate',
    'load_checkpoint',
]
