"""Exception hierarchy shared by every rcvae module."""


class RcvaeError(Exception):
    """Base class for all package errors."""


class ShapeError(RcvaeError, ValueError):
    pass


class NumericError(RcvaeError, ArithmeticError):
    """Raised when a NaN/Inf appears where finite values are required."""


class StateError(RcvaeError, RuntimeError):
    pass


class DataError(RcvaeError, ValueError):
    """Bad input data: schema violations, invariant breaks, empty inputs."""


class FormatError(RcvaeError, ValueError):
    """Malformed or truncated binary artifact."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class SpecError(RcvaeError, ValueError):
    """Invalid ablation/cluster/config specification."""


class LabelLookupError(RcvaeError, KeyError):
    pass


class HpoError(RcvaeError, RuntimeError):
    pass
