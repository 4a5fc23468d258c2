"""Deformation-aware local descriptors on a small numpy autodiff core."""

from .errors import DealError, InputError, NumericError, SingularSystemError
from .geometry import Keypoint, TpsParams, tps_apply, tps_fit
from .network import ArchConfig, ModelWeights, describe, fixed_polar_variant, init_weights

__all__ = [
    "ArchConfig",
    "DealError",
    "InputError",
    "Keypoint",
    "ModelWeights",
    "NumericError",
    "SingularSystemError",
    "TpsParams",
    "describe",
    "fixed_polar_variant",
    "init_weights",
    "tps_apply",
    "tps_fit",
]

__version__ = "0.1.0"
