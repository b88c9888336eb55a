"""Shared exception types.

Everything raised on purpose by this package derives from WbposeError so
callers can catch one base class. Names mirror the failure they signal.
"""


class WbposeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(WbposeError, ValueError):
    """Operands have incompatible shapes; message includes the shapes."""


class NotScalar(WbposeError, ValueError):
    """backward() was handed a non-scalar loss."""


class DetachedGraph(WbposeError, RuntimeError):
    """Loss tensor is not attached to a live tape (or the tape was consumed)."""


class DegenerateInput(WbposeError, ValueError):
    """Numerically degenerate input, e.g. a collapsed 6D rotation."""


class NotARotation(WbposeError, ValueError):
    """Matrix fails the orthonormality check beyond tolerance."""


class InvalidTree(WbposeError, ValueError):
    """Kinematic parent table is not a valid rooted tree."""


class BehindCamera(WbposeError, ValueError):
    """Point with z <= eps cannot be perspective-projected."""


class DegenerateBox(WbposeError, ValueError):
    """Box with non-positive width or height."""


class UnknownMode(WbposeError, ValueError):
    """Mode string not in the accepted set."""


class MissingGT(WbposeError, ValueError):
    """Ground truth required by an unmasked loss term is absent."""


class Degenerate(WbposeError, ValueError):
    """Point set too degenerate for Procrustes alignment (rank < 2)."""


class IOFailure(WbposeError, OSError):
    """Read or write of a package file format failed."""


class FormatError(WbposeError, ValueError):
    """Serialized payload has a bad magic, version, or structure."""
