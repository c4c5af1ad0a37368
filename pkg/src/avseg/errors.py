"""Exception types shared across the package.

Everything raised on purpose derives from :class:`AvsegError` so the CLI can
catch one base class, print a single line, and exit nonzero.
"""

from __future__ import annotations

__all__ = [
    "AvsegError",
    "ShapeError",
    "ParameterError",
    "EmptyInputError",
    "InsufficientDataError",
    "FileFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "ConfigError",
    "TrainingDiverged",
]


class AvsegError(Exception):
    """Base class for errors raised deliberately by this package."""


class ShapeError(AvsegError):
    """An array argument has the wrong shape or dimensionality."""


class ParameterError(AvsegError):
    """A scalar argument is outside its legal range."""


class EmptyInputError(AvsegError):
    """An input that must be non-empty (frames, queries, points) is empty."""


class InsufficientDataError(AvsegError):
    """Fewer data points than the operation needs (e.g. n < k in k-means)."""


class FileFormatError(AvsegError):
    """Base for binary container decode failures."""


class BadMagicError(FileFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(FileFormatError):
    """The container version is not one this build can read."""

    def __init__(self, found: int, expected: int):
        super().__init__(f"unsupported container version {found} (expected {expected})")
        self.found = found
        self.expected = expected


class TruncatedFileError(FileFormatError):
    """The file ended before the declared payload was read."""


class ConfigError(AvsegError):
    """A config file contains an unknown key/section or an unparseable value."""


class TrainingDiverged(AvsegError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term}={value!r}")
        self.step = step
        self.term = term
        self.value = value
