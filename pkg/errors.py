"""
Exception hierarchy for the trajectory toolkit.

Every failure the library reports on purpose derives from TrajmaskError, so the
command line layer can map it to exit code 1 with a single except clause.
"""

from typing import Optional


class TrajmaskError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TrajmaskError):
    """A configuration value violates its declared range."""


class InvalidStop(TrajmaskError):
    """A stop point has non-finite or out-of-domain values."""


class NotSorted(TrajmaskError):
    """Pings were not ordered by timestamp."""


class NoPois(TrajmaskError):
    """A POI table or map is empty where one is required."""


class ParseError(TrajmaskError):
    """A line of an input file could not be parsed."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(TrajmaskError):
    """Parsed data violates a trajectory invariant."""


class TooShort(TrajmaskError):
    """A window is too short to build a mask plan for."""


class VocabError(TrajmaskError):
    """A category index or vocabulary does not match what is expected."""


class NumericalError(TrajmaskError):
    """Non-finite values appeared in activations or gradients."""

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class StateError(TrajmaskError):
    """An operation was called without the state it depends on."""


class FormatError(TrajmaskError):
    """A checkpoint file is corrupt, truncated or inconsistent."""

    def __init__(self, message: str, tensor: Optional[str] = None):
        if tensor is not None:
            message = f"tensor '{tensor}': {message}"
        super().__init__(message)
        self.tensor = tensor


class NoMaskedCells(TrajmaskError):
    """A loss was requested over an empty set of masked cells."""


class EmptyDataset(TrajmaskError):
    """A dataset produced no usable windows."""


class NoSamples(TrajmaskError):
    """A metric was requested over an empty prediction set."""
