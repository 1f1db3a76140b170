"""Exception types shared across the package."""


class DataError(ValueError):
    """Input data could not be parsed or violates a data precondition."""


class InvariantViolation(RuntimeError):
    """An internal contract was broken (for example a mixed-source batch)."""


class AdapterPoisoned(RuntimeError):
    """A stream adapter saw a non-finite activation and refuses further input."""
