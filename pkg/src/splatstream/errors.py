"""Exception types shared across the package."""


class SplatStreamError(Exception):
    """Base class for all package errors."""


class FormatError(SplatStreamError):
    """Malformed file header or container structure."""


class TruncationError(FormatError):
    """Payload shorter than its header declares."""


class SchemaError(FormatError):
    """A required property or field is missing."""


class ParameterError(SplatStreamError, ValueError):
    """An argument violates an operation's precondition."""


class RangeError(SplatStreamError, IndexError):
    """Index outside the valid range."""


class DegenerateInputError(SplatStreamError, ValueError):
    """Point sets too small or rank-deficient for alignment."""


class InfeasibleError(SplatStreamError):
    """No assignment fits the byte budget."""


class SizeError(SplatStreamError, ValueError):
    """Problem too large for exhaustive enumeration."""


class TraceCoverageError(SplatStreamError):
    """A trace ends before the content it must cover."""


class StageError(SplatStreamError):
    """A pipeline stage failed; carries the stage name and offending path."""

    def __init__(self, stage, message, path=None):
        self.stage = stage
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"[{stage}] {message}{where}")
