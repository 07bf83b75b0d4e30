"""Tone-aware discrete speech units learned with CTC supervision, at desk scale."""

from toneunit.errors import (
    CheckpointError,
    CorpusFormatError,
    ConfigError,
    ContractError,
    DivergenceError,
    InfeasibleTargetError,
    InputTooShortError,
    NonFiniteGradientError,
    RangeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CorpusFormatError",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "InfeasibleTargetError",
    "InputTooShortError",
    "NonFiniteGradientError",
    "RangeError",
    "UndefinedMetricError",
]
