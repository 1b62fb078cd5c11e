"""Exception types shared across the package."""


class AcnetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AcnetError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(AcnetError, ValueError):
    """A source coincides with a microphone (zero propagation distance)."""


class FormatError(AcnetError, ValueError):
    """A binary or JSON file does not match the expected layout."""


class NoSourceError(AcnetError, ValueError):
    """A beam map has no strictly positive maximum."""
