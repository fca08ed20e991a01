"""Exception hierarchy. Each family maps to a CLI exit code."""


class CAMFError(Exception):
    exit_code = 1


class ConfigError(CAMFError, ValueError):
    exit_code = 2


class DataError(CAMFError, ValueError):
    exit_code = 3

    def __init__(self, message, subject_id=None):
        if subject_id is not None:
            message = f"[{subject_id}] {message}"
        super().__init__(message)
        self.subject_id = subject_id


class ShapeMismatchError(DataError):
    pass


class MissingFileError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class EmptyBatchError(CAMFError, ValueError):
    exit_code = 3


class NumericError(CAMFError, ArithmeticError):
    """Divergence or NaN parameters."""

    exit_code = 4
