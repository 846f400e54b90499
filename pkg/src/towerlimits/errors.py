"""Shared exception types."""


class NumericalError(RuntimeError):
    """A computation failed to converge or left its validity envelope."""


class PreconditionError(ValueError):
    """An input violates a documented precondition."""
