"""Exception hierarchy. CLI exit codes key off these classes."""


class TfpAccError(Exception):
    exit_code = 3


class ConfigError(TfpAccError):
    exit_code = 1


class DataValidationError(TfpAccError, ValueError):
    exit_code = 2


class ParseError(DataValidationError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DomainError(DataValidationError):
    pass


class NumericalError(TfpAccError, ArithmeticError):
    exit_code = 3


class RankDeficiencyError(NumericalError):
    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design is rank deficient; collinear columns: {self.columns}")
