"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Input violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or unusable value.

    ``index`` carries the offending dimension, coordinate, step or
    iteration when one is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SchemaError(InvalidArgumentError):
    """A persisted record violates the file schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(SchemaError):
    """A persisted record could not be parsed at all."""
