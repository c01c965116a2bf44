"""Exception types shared across the package."""


class BudgetAllocError(Exception):
    """Base class for all package errors."""


class DomainError(BudgetAllocError, ValueError):
    """A budget argument lies outside the curve's domain [0, B]."""


class ShapeError(BudgetAllocError, ValueError):
    """Vector lengths disagree with the number of periods."""


class ValidationError(BudgetAllocError, ValueError):
    """An environment, curve or allocation breaks one of its invariants."""


class EnvFileError(BudgetAllocError, ValueError):
    """An environment file could not be parsed."""


class GenerationError(BudgetAllocError, RuntimeError):
    """Random environment generation failed after all retries."""


class InvariantError(BudgetAllocError, RuntimeError):
    """A numerical routine detected a non-monotone curve."""


class CapacityError(BudgetAllocError, ValueError):
    """An enumeration grid is too large or degenerate."""


class ConfigError(BudgetAllocError, ValueError):
    """Invalid configuration values."""


class TransportError(BudgetAllocError, RuntimeError):
    """A completion endpoint could not be reached or returned an error status."""


class NumericError(BudgetAllocError, ArithmeticError):
    """A likelihood ratio or density became invalid."""


class OutputConflictError(BudgetAllocError, RuntimeError):
    """An output directory already holds different results."""


class ExperimentError(BudgetAllocError, RuntimeError):
    """One or more repeats of an experiment failed."""
