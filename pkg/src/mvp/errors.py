"""Shared exception types."""


class MvpError(Exception):
    """Base class for all package errors."""


class CalibrationError(MvpError):
    """A transform or intrinsics object violates its invariants."""


class FormatError(MvpError):
    """A file failed to parse or violates its format contract."""
