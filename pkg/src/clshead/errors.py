"""Exception taxonomy shared by the engine and the CLI.

The CLI maps these onto exit codes: validation/configuration problems
exit with 2, data/file problems with 3, numerical divergence with 4.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EngineError):
    """An argument or configuration value violates a documented precondition."""


class ShapeError(ValidationError):
    """Array dimensions are inconsistent; carries both offending shapes."""

    def __init__(self, message: str, *, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigurationError(EngineError):
    """An experiment configuration references data or options that do not exist."""


class DataError(EngineError):
    """A data file is missing, unreadable, or internally inconsistent."""


class FeatureFileError(DataError):
    """A feature container failed to parse; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class DimOverflowError(FeatureFileError):
    pass


class DivergedError(EngineError):
    """Training produced a non-finite loss; ``epoch`` is where it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
