"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ContestDMLError(Exception):
    exit_code = 1


class ConfigError(ContestDMLError, ValueError):
    exit_code = 1


class DataError(ContestDMLError, ValueError):
    exit_code = 2


class NumericError(ContestDMLError, ArithmeticError):
    exit_code = 3


class RankDeficientError(NumericError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient; collinear columns: {', '.join(self.columns)}")
