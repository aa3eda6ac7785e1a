"""Exception hierarchy shared by the library and the CLI."""


class RasaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RasaError, ValueError):
    """Inconsistent dimensions, ranks or layer indices."""


class NumericalError(RasaError, ArithmeticError):
    """A factorization or linear solve failed, or a value became non-finite."""

    def __init__(self, message, shape=None, layer=None):
        super().__init__(message)
        self.shape = shape
        self.layer = layer


class FormatError(RasaError):
    """A file on disk could not be parsed."""


class MagicMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass
