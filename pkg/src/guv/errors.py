"""Exception taxonomy shared by every module.

Each class maps to one CLI exit code so failures stay diagnosable from
shell scripts: invalid input -> 2, numeric failure -> 3, check failure -> 4.
"""


class GuvError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class InvalidArgumentError(GuvError):
    """Caller violated a documented precondition (bad shapes, ranges, flags)."""

    exit_code = 2


class FormatError(InvalidArgumentError):
    """A file exists but its bytes do not parse as the declared format."""


class UnsupportedVersionError(FormatError):
    """A file parsed but declares a format version this build cannot read."""


class NumericFailureError(GuvError):
    """A computation produced non-finite values or diverged."""

    exit_code = 3


class CheckFailureError(GuvError):
    """A self-check oracle suite found a mismatch."""

    exit_code = 4
