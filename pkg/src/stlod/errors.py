"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised for malformed inputs, inconsistent dimensions or divisibility violations."""


class NumericalFailure(RuntimeError):
    """Raised when a linear system that should be solvable turns out singular."""


class FingerprintMismatch(InvalidArgumentError):
    """A cached corrector operator does not belong to the requested discretization."""
