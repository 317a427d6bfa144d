"""Exception types shared across the library."""


class DispersionLabError(Exception):
    """Base class for all library errors."""


class DimensionError(DispersionLabError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class KernelDomainError(DispersionLabError, ValueError):
    """A normalizer kernel received inputs outside its valid domain
    (e.g. a non-positive denominator after the stabilizer threshold)."""


class WindowPartitionError(DispersionLabError, ValueError):
    """Window size does not evenly partition the sequence."""


class BoundViolationError(DispersionLabError, AssertionError):
    """An observed attention coefficient fell outside its theoretical bounds.

    Raised by dispersion sweeps: a violation falsifies the theory being
    tested, so it is an error, not a warning.
    """


class DifferentiationError(DispersionLabError, RuntimeError):
    """Backward pass encountered an op with no registered adjoint."""


class DegenerateQueryError(DispersionLabError, ValueError):
    """A causal linear attention denominator stayed below the stabilizer."""


class PreconditionError(DispersionLabError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(DispersionLabError, ValueError):
    """A model or CLI configuration is internally inconsistent."""


class TrainingError(DispersionLabError, RuntimeError):
    """Training diverged (non-finite loss)."""
