"""Exception hierarchy shared by all modules."""


class DenoiseError(Exception):
    """Base class for errors raised by this package."""


class DomainError(DenoiseError, ValueError):
    """An argument is outside the domain of an operation."""


class FormatError(DenoiseError, ValueError):
    """A file could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DenoiseError, ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""
