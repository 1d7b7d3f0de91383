"""Singular value thresholding for affine rank minimization, classic and learned."""

from .errors import FormatError, NumericError, TrainingDivergedError
from .lowrank import SvdFactors, nuclear_norm, svd, svt_operator
from .measurement import MeasurementOperator, generate_operator
from .network import (
    ForwardTape,
    Theta,
    ThetaGrad,
    accumulate,
    backward,
    backward_batch,
    forward,
    forward_batch,
    mse_loss,
    svt_init,
)
from .svt import SvtConfig, default_config, svt_solve, svt_solve_batch

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "NumericError",
    "TrainingDivergedError",
    "SvdFactors",
    "nuclear_norm",
    "svd",
    "svt_operator",
    "MeasurementOperator",
    "generate_operator",
    "ForwardTape",
    "Theta",
    "ThetaGrad",
    "accumulate",
    "backward",
    "backward_batch",
    "forward",
    "forward_batch",
    "mse_loss",
    "svt_init",
    "SvtConfig",
    "default_config",
    "svt_solve",
    "svt_solve_batch",
    "__version__",
]
