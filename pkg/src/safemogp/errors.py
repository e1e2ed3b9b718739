"""Exception types shared across the package."""


class SafeMogpError(Exception):
    """Base class for all package errors."""


class InputError(SafeMogpError, ValueError):
    """Malformed arguments: wrong shapes, out-of-range channels, bad counts."""


class InvalidSpecError(InputError):
    """A kernel or model specification violates its invariants."""


class NumericalError(SafeMogpError, ArithmeticError):
    """A factorization or density evaluation failed even after jitter."""


class InferenceError(SafeMogpError):
    """Hyperparameter optimization or sampling produced no usable result."""


class EmptySafeSet(SafeMogpError):
    """No pool candidate satisfies the safety constraint."""


class ConfigError(SafeMogpError, ValueError):
    """An experiment configuration is invalid; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CsvParseError(InputError):
    """Base class for CSV ingestion failures."""


class EmptyFileError(CsvParseError):
    pass


class MissingColumnError(CsvParseError):
    def __init__(self, column):
        super().__init__(f"missing column {column!r}")
        self.column = column


class NonNumericCellError(CsvParseError):
    def __init__(self, row, column, token):
        super().__init__(f"non-numeric value {token!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.token = token
