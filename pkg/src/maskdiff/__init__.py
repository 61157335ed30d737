"""Conditional absorbing-state discrete diffusion over multi-level token grids."""

__version__ = "0.1.0"

from .core import ConditionBundle, DataDistribution, ScoreField, TokenGrid
from .errors import (
    EngineError,
    EnumerationBudgetError,
    LossDomainError,
    NumericFaultError,
    UnreachableStateError,
    ValidationError,
)
from .schedule import NoiseSchedule

__all__ = [
    "ConditionBundle",
    "DataDistribution",
    "ScoreField",
    "TokenGrid",
    "NoiseSchedule",
    "EngineError",
    "ValidationError",
    "UnreachableStateError",
    "EnumerationBudgetError",
    "LossDomainError",
    "NumericFaultError",
    "__version__",
]
