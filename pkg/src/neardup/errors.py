"""Exception hierarchy shared across the package.

Input/usage problems derive from ValueError so they read naturally in
library code; integrity and numeric failures get their own branches so
the CLI can map them to a distinct exit code.
"""


class NearDupError(Exception):
    """Base class for all package errors."""


class EmptyInputError(NearDupError, ValueError):
    """An operation received empty text or an empty collection."""


class InvalidCodepointError(NearDupError, ValueError):
    """A codepoint outside the Unicode scalar range (or a surrogate)."""


class ConfigMismatchError(NearDupError, ValueError):
    """Inputs do not match the configuration they are used with."""


class FormatError(NearDupError, ValueError):
    """A file does not parse as the expected container format."""


class IntegrityError(NearDupError):
    """A file parses but its contents are inconsistent (truncation, tampering)."""


class NumericError(NearDupError):
    """A numeric computation produced non-finite values."""


class ScheduleExhaustedError(NearDupError, ValueError):
    """An optimizer step was requested past the end of the learning-rate schedule."""
