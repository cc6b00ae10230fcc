class RegInitError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RegInitError, ValueError):
    pass


class DegenerateInputError(RegInitError, ValueError):
    """Raised when a similarity is undefined, e.g. both images constant."""


class FormatError(RegInitError, ValueError):
    """Malformed or inconsistent file on disk."""


class DivergedError(RegInitError, RuntimeError):
    """An iterative procedure produced a non-finite loss.

    The partial trace is kept on ``self.trace`` for post-mortem inspection.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ArtifactExistsError(RegInitError, FileExistsError):
    """An output file already exists and overwriting was not requested."""
