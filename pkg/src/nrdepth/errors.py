"""Exception hierarchy shared across the package."""


class NRDepthError(Exception):
    """Base class for all package errors."""


class InputError(NRDepthError):
    """Malformed or inconsistent input data (files, shapes, config)."""


class TopologyError(InputError):
    pass


class InvalidCameraError(InputError):
    pass


class BehindCameraError(NRDepthError):
    pass


class InvalidDepthError(NRDepthError):
    pass


class DegenerateNeighborhoodError(NRDepthError):
    """Raised when a vertex neighborhood is too degenerate to register."""

    def __init__(self, vertex, message=None):
        self.vertex = int(vertex)
        super().__init__(message or f"degenerate neighborhood at vertex {self.vertex}")


class NumericalError(NRDepthError):
    """Non-finite values appeared during optimization."""

    def __init__(self, message, pixels=None):
        super().__init__(message)
        self.pixels = pixels
