"""Exception hierarchy shared by every module of the package."""


class ReldError(Exception):
    """Base class for all package errors."""


class ShapeError(ReldError, ValueError):
    pass


class NumericError(ReldError, ArithmeticError):
    pass


class InfeasibleError(ReldError):
    """Raised when no node can be selected (every entry masked)."""


class FeasibilityError(ReldError, ValueError):
    """Raised when a move violates the routing constraints."""


class ConfigurationError(ReldError, ValueError):
    pass


class SizeError(ReldError, ValueError):
    pass


class ParseError(ReldError, ValueError):
    """Malformed input. ``kind`` is a short stable tag for the failure class."""

    def __init__(self, message, line=None, kind: str = "malformed"):
        self.line = line
        self.kind = kind
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ReldError):
    pass


class ChecksumError(CheckpointError):
    pass


class MagicError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass
