"""Exception hierarchy; the CLI maps these onto exit codes."""


class TTDAuditError(Exception):
    exit_code = 3


class DataValidationError(TTDAuditError, ValueError):
    exit_code = 2


class ParseError(DataValidationError):
    pass


class EmptyInputError(DataValidationError):
    pass


class StratificationError(DataValidationError):
    pass


class UndefinedMetricError(TTDAuditError, ValueError):
    """Raised when a summary needs at least one defined gap value and has none."""
