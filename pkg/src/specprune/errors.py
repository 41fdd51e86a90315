"""Exception types shared across the package.

The CLI maps these onto exit codes: I/O problems exit 2, validation
problems exit 3, numerical failures exit 4.
"""


class ValidationError(ValueError):
    """Input violates a structural contract (schema, invariant, range)."""


class DegenerateInputError(ValueError):
    """A representation has (near-)zero variance and cannot be normalized."""


class ConvergenceError(RuntimeError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class RecordRejected(ValueError):
    """A signal record was rejected during ingestion; carries the reason."""
