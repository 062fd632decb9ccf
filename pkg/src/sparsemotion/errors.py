"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` (the class name) so the
CLI can emit single-line JSON diagnostics.
"""


class SparseMotionError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class DegenerateInput(SparseMotionError, ValueError):
    pass


class ShapeError(SparseMotionError, ValueError):
    pass


class ParseError(SparseMotionError, ValueError):
    pass


class VersionError(SparseMotionError, ValueError):
    pass


class InvalidFps(SparseMotionError, ValueError):
    pass


class ConfigError(SparseMotionError, ValueError):
    pass


class DataError(SparseMotionError, ValueError):
    pass


class MissingGrad(SparseMotionError, RuntimeError):
    pass


class UnknownParam(SparseMotionError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MissingCheckpoint(SparseMotionError, FileNotFoundError):
    pass


class InsufficientContext(SparseMotionError, ValueError):
    pass


class InsufficientFrames(SparseMotionError, ValueError):
    pass


class InsufficientSamples(SparseMotionError, ValueError):
    pass


class SamePriorError(SparseMotionError, ValueError):
    pass
