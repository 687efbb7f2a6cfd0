"""Deterministic benchmark harness for frozen pathology embeddings."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    ContractViolation,
    FormatError,
    HistobenchError,
    JoinError,
    NumericError,
    PlanningError,
)

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "FormatError",
    "HistobenchError",
    "JoinError",
    "NumericError",
    "PlanningError",
    "__version__",
]
