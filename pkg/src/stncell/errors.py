"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes do not conform to an operation's contract."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class ParseError(ValueError):
    """Raised for malformed annotation or config files."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
