"""Exception types shared across the package."""


class UclError(Exception):
    """Base class for all package errors."""


class ShapeError(UclError, ValueError):
    pass


class ContractError(UclError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(UclError, ValueError):
    pass


class TemplateError(UclError, ValueError):
    pass


class VocabularyError(UclError, ValueError):
    pass


class FormatError(UclError, ValueError):
    """A checkpoint or data file could not be decoded.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(UclError, ArithmeticError):
    """A computation produced NaN or Inf."""
