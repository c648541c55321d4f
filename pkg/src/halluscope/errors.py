"""Exception hierarchy shared across the toolkit.

Exit-code mapping at the CLI: ValidationError -> 2, InfeasibleGridError -> 3,
anything else unexpected -> 4.
"""


class HalluscopeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(HalluscopeError):
    """Bad user input: malformed files, mismatched IDs, out-of-range parameters."""


class FormatError(ValidationError):
    """Malformed on-disk container. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(ValidationError):
    """Sample-ID mismatch between files that must agree."""


class EmptyBankError(ValidationError):
    """Safe-bank truncation left no samples."""


class InfeasibleGridError(HalluscopeError):
    """Every cell of a tuning grid was infeasible."""


class InternalError(HalluscopeError):
    """Invariant violation inside the toolkit; a bug, not a user error."""
