"""
densitymap — Exceptions
Every error raised on purpose by the package derives from DensityMapError.
"""

from typing import Optional


class DensityMapError(Exception):
    """Base class for densitymap errors."""


class DimensionError(DensityMapError, ValueError):
    """Shapes, lengths or binnings that should agree do not."""


class DomainError(DensityMapError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class EmptyMaskError(DensityMapError, ValueError):
    """An operation needs at least one observed pixel and got none."""


class FormatError(DensityMapError):
    """A DMAP1 file could not be parsed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class UsageError(DensityMapError):
    """Bad command-line usage or configuration file."""
