"""Shared exception types.

The CLI maps these to exit codes: validation failures (everything below,
plus plain ValueError) exit 1, I/O problems (OSError) exit 2.
"""


class ShapeError(ValueError):
    """Tensor or layer dimensions do not line up."""


class FormatError(ValueError):
    """A binary or JSON artifact is malformed; message names the offset/field."""


class DomainError(ValueError):
    """An argument is outside the operation's domain."""


class DataError(ValueError):
    """A dataset record is invalid; message names the offending sample."""


class GenerationError(RuntimeError):
    """Synthetic case generation could not satisfy its constraints."""
