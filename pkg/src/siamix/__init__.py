"""Bi-temporal transformer segmentation for building and change detection.

The package is layered bottom-up: ``tensor`` (autodiff), ``nn`` (layers),
``encoder``/``fusion``/``decoder``, ``model`` (assembly and audits),
``objectives``, ``data``, ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError, SiamixError
from .model import Model, build, count_flops, count_params, erf_probe, forward, get_variant
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "Model",
    "build",
    "forward",
    "count_params",
    "count_flops",
    "erf_probe",
    "get_variant",
    "SiamixError",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "ShapeError",
]
