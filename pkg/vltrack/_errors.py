class VltrackError(Exception):
    """Base class for all errors raised by the harness."""


class ValidationFailure(VltrackError):
    """
    Raised when user-supplied input (files, arguments, configuration) is rejected.
    The command-line interface maps these to exit code 2.
    """


class EndpointFailure(VltrackError):
    """
    Raised when an external endpoint (refiner or tracker) cannot serve a request.
    The command-line interface maps these to exit code 3.
    """


class InvalidArgument(ValidationFailure):
    """Raised when a numeric argument is outside of its documented range."""
