"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line front-end can map
failures to process exit statuses without string matching.
"""

from __future__ import annotations


class VeinFPNError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ParameterError(VeinFPNError, ValueError):
    """Shapes or argument values do not satisfy an operation's contract."""


class GeometryError(ParameterError):
    """Spatial sizes are incompatible (kernel too large, indivisible dims...)."""


class DegenerateBatchError(ParameterError):
    """Batch statistics would be computed over fewer than two elements."""


class PoisonedGradientError(VeinFPNError, ArithmeticError):
    """A gradient buffer contains NaN or Inf."""

    exit_code = 4


class FormatError(VeinFPNError):
    """A file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    """A file declares a format version this reader does not understand."""


class SegmentationError(VeinFPNError):
    """No finger-like region could be located in a presentation."""


class UndefinedScoreError(VeinFPNError):
    """A comparison score is undefined (both templates empty)."""


class ProtocolError(VeinFPNError):
    """A protocol or score list is inconsistent."""


class UndefinedRateError(ProtocolError, ZeroDivisionError):
    """An error rate was requested over an empty population."""
