"""Exception hierarchy shared across the harness."""


class HistobenchError(Exception):
    """Base class for all harness errors."""


class ContractViolation(HistobenchError, ValueError):
    """An argument violates a documented precondition (shape, range, dtype)."""


class NumericError(HistobenchError, ArithmeticError):
    """Non-finite values or a numerically unsolvable system."""


class FormatError(HistobenchError, ValueError):
    """A binary or CSV file does not match its declared layout."""


class JoinError(HistobenchError, ValueError):
    """Embedding rows and manifest records cannot be aligned."""


class ConfigurationError(HistobenchError, ValueError):
    """A task, registry entry, or split request is not satisfiable."""


class PlanningError(HistobenchError, ValueError):
    """A run plan cannot be constructed (missing inputs)."""
