"""Numerical solvers and Nash-certification tools for trader/market-maker games."""

__version__ = "0.1.0"

from ._errors import (
    BasisError,
    ConfigError,
    DimensionError,
    IntegratorError,
    LiqGamesError,
    ParameterError,
    SolverError,
)
from .grids import TimeGrid

__all__ = [
    "TimeGrid",
    "LiqGamesError",
    "DimensionError",
    "ParameterError",
    "IntegratorError",
    "SolverError",
    "BasisError",
    "ConfigError",
    "__version__",
]
