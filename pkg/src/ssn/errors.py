"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class StateError(RuntimeError):
    """Required intermediate state (e.g. pooling indices) is missing."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""
