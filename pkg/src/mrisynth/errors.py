"""Exception types shared across the package.

Grouped so callers (and the CLI) can distinguish bad inputs (usage errors,
exit code 1) from runtime failures (exit code 2).
"""


class MrisynthError(Exception):
    """Base class for package-specific errors."""


class DataError(MrisynthError, ValueError):
    """Invalid data contents or on-disk layout."""


class ShapeMismatchError(DataError):
    """Arrays that must share a shape do not."""


class DegenerateRangeError(DataError):
    """An intensity range collapsed to a point (constant volume)."""


class PriorError(DataError):
    """Intensity prior could not be computed (e.g. empty tissue mask)."""


class ParameterError(MrisynthError, ValueError):
    """Invalid configuration or argument value."""


class ContractError(MrisynthError, ValueError):
    """A tensor handed to a network violates its shape/value contract."""


class InsufficientDataError(MrisynthError, ValueError):
    """Too few observations for a statistical routine."""


class TrainingDivergedError(MrisynthError, RuntimeError):
    """Loss became non-finite and recovery failed."""
