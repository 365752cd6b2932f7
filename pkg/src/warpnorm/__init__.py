"""Spatially warped normalisation for pose-guided image generation, in numpy.

Submodules: :mod:`~warpnorm.tensor` (ops and adjoints), :mod:`~warpnorm.normalize`
(AdaIN / SAIN / SAWN / M-SAWN), :mod:`~warpnorm.gradcheck`, :mod:`~warpnorm.synth`
(synthetic scenes), :mod:`~warpnorm.model`, :mod:`~warpnorm.train` and
:mod:`~warpnorm.cli`.
"""
__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DimensionError, TrainingAborted
from .normalize import InstanceStats, ModulationMaps, NormVariant, adain, msawn, sain, sawn

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "TrainingAborted",
    "InstanceStats", "ModulationMaps", "NormVariant",
    "adain", "sain", "sawn", "msawn",
    "__version__",
]
