"""Shared exception types."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class GuardError(ValueError):
    """A combinatorial or size guard was violated."""


class NonPSDError(ValueError):
    """A kernel that must be positive semidefinite is not."""


class SupportMismatchError(ValueError):
    """A restricted path has no counterpart in the small ensemble."""


class OverflowGuardError(ArithmeticError):
    """An exponent left the representable range; result would be garbage."""
