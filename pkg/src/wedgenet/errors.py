"""Exception types shared across the package.

Every error raised on a user-facing path is one of these, so callers (and
the command line driver) can map failures to exit codes without string
matching.
"""


class WedgenetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(WedgenetError):
    """A configuration value is invalid or two values are inconsistent."""


class ShapeError(WedgenetError):
    """An array argument has the wrong shape or dimensionality."""


class InputError(WedgenetError):
    """Input data violates a precondition (bad label, empty cloud, ...)."""


class ParseError(WedgenetError):
    """A file could not be parsed.

    Carries the byte offset where parsing failed when that is known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(WedgenetError):
    """A computation produced non-finite values."""


class TrainingError(WedgenetError):
    """Training cannot proceed (corrupt data over threshold, bad gradients)."""
