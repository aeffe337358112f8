"""Exception hierarchy shared by every module."""


class LstmCapsError(Exception):
    """Base class for all package errors."""


class ShapeError(LstmCapsError, ValueError):
    pass


class ContractError(LstmCapsError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LstmCapsError, ValueError):
    pass


class DatasetError(LstmCapsError, ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class UndefinedRateError(LstmCapsError, ZeroDivisionError):
    """FAR or MAR requested with an empty denominator."""


class TrainingDiverged(LstmCapsError, FloatingPointError):
    pass


class CheckpointError(LstmCapsError, IOError):
    pass
