"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class FormatError(InvalidInputError):
    """A dataset or checkpoint file is malformed, truncated or corrupted."""


class TeacherNotReadyError(InvalidInputError):
    """The supervising classifier is below the configured accuracy floor."""
