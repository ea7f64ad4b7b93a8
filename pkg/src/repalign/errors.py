"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Input data is malformed (e.g. contains NaN or Inf)."""


class InvalidArgument(ValueError):
    """A parameter is outside its allowed range."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary layout."""


class UnsupportedVersion(FormatError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values appeared during a computation (usually divergence)."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
