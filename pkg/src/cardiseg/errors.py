"""Exception hierarchy shared by all cardiseg modules."""


class CardisegError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CardisegError):
    """Tensor or array shapes violate an operation's contract."""


class ParameterError(CardisegError):
    """A scalar argument is outside its legal range."""


class ConfigError(CardisegError):
    """A configuration object or document is invalid.

    ``path`` names the offending field (dotted JSON path) when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ValidationError(CardisegError):
    """Data content violates an invariant (label values, binary masks...)."""


class ParseError(CardisegError):
    """A file on disk is malformed."""


class TrainingAbort(CardisegError):
    """Training hit a non-recoverable numeric state (non-finite loss/grad)."""
