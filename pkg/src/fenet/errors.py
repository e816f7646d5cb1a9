"""Exception hierarchy; the CLI maps each class to its own exit code."""


class FenetError(Exception):
    category = "error"


class InvalidInputError(FenetError, ValueError):
    category = "invalid-input"


class FormatError(FenetError, ValueError):
    """Malformed file content. ``line`` is 1-based when known."""

    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(FenetError, ValueError):
    category = "config"


class NumericError(FenetError, ArithmeticError):
    category = "numeric"
