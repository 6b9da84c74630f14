"""Exception hierarchy shared by every spotkit module."""


class SpotkitError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(SpotkitError, ValueError):
    """An argument violates an operation's precondition."""


class NumericError(SpotkitError, ArithmeticError):
    """An iterative routine failed to converge.

    ``last_estimate`` holds the value reached before giving up.
    """

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class GenerationError(SpotkitError):
    """Synthetic scene sampling could not satisfy its constraints."""


class TrainingError(SpotkitError):
    """Training produced a non-finite loss."""


class FormatError(SpotkitError):
    """A binary container is malformed or truncated."""


class CorruptionError(FormatError):
    """A binary container failed its checksum."""
