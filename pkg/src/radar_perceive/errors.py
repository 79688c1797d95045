"""Exception types shared across the package.

Each class carries the exit code the command line uses for it.
"""

from __future__ import annotations


class RadarPerceiveError(Exception):
    exit_code = 1


class InvalidInputError(RadarPerceiveError, ValueError):
    """Arguments or data that violate an operation's preconditions."""

    exit_code = 3


class ManifestError(InvalidInputError):
    """A manifest or truth file that cannot be parsed."""

    exit_code = 3


class ShapeError(InvalidInputError):
    """Tensor shapes that do not chain."""

    exit_code = 3


class ArchitectureError(RadarPerceiveError):
    """Weights that do not belong to the requested layer stack."""

    exit_code = 4


class InvalidStateError(RadarPerceiveError, RuntimeError):
    exit_code = 1


class FormatError(RadarPerceiveError):
    """A binary file with a bad magic, version or length."""

    exit_code = 5


MISSING_FILE_EXIT_CODE = 2
