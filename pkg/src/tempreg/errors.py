"""Exception hierarchy shared across the package."""


class TempRegError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TempRegError, ValueError):
    pass


class OutOfDomainError(InvalidInputError):
    """A point fell outside the support of a B-Spline lattice."""


class DegenerateMetricError(TempRegError):
    """Every correlation window had (near) zero variance."""


class OptimizationError(InvalidInputError):
    """Non-finite cost or gradient at the initial point."""


class FormatError(TempRegError):
    """Unreadable or corrupt image / transform file."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


class FrameError(TempRegError):
    """Wraps a per-frame failure with its series index."""

    def __init__(self, frame, cause):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame
        self.cause = cause
