"""Exception hierarchy shared by every otbe module."""


class OTBEError(Exception):
    """Base class for all library errors."""


class InvalidData(OTBEError, ValueError):
    """Malformed input: non-finite entries, shape mismatch, non-PSD matrix."""


class InsufficientSamples(OTBEError, ValueError):
    pass


class InvalidParameter(OTBEError, ValueError):
    pass


class InvalidConfig(OTBEError, ValueError):
    pass


class SingularCovariance(OTBEError, ArithmeticError):
    """A covariance that must be inverted is numerically singular."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class ConvergenceFailure(OTBEError, ArithmeticError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UnknownClass(OTBEError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ClassTooSmall(OTBEError, ValueError):
    pass
