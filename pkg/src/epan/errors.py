"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
DataFormatError -> 4. Everything else is a programming error and escapes.
"""


class EpanError(Exception):
    """Base class for all package errors."""


class DimensionError(EpanError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class UsageError(EpanError, RuntimeError):
    """An operation was invoked outside its contract (e.g. backward on a non-scalar)."""


class NumericError(EpanError, ArithmeticError):
    """A non-finite value appeared where finite numerics are required."""


class ConfigError(EpanError, ValueError):
    """A config file or run configuration violates the schema."""


class DataFormatError(EpanError, ValueError):
    """An on-disk artifact (image, checkpoint, manifest) is malformed."""


class TripletMiningError(EpanError, ValueError):
    """A batch cannot supply the positives/negatives the miner needs."""


class EvaluationError(EpanError, ValueError):
    """A retrieval evaluation has no valid queries left after filtering."""
