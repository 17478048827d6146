"""Exception hierarchy shared across the package."""


class GraceError(Exception):
    """Base class for all package errors."""


# --- persistence / input validation (CLI exit code 2) ---


class InputError(GraceError):
    pass


class PersistenceError(InputError):
    pass


class ValidationError(InputError):
    pass


class FormatError(InputError):
    pass


class CorruptionError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class MissingVariantError(ValidationError):
    pass


# --- numerical preconditions ---


class DecompositionUndefinedError(GraceError):
    pass


class InsufficientDataError(GraceError):
    pass


class DegenerateDirectionError(GraceError):
    pass


class UnbalancedGridError(GraceError):
    pass


# --- oracle / runtime (CLI exit code 3) ---


class OracleError(GraceError):
    pass


class EvaluatorTimeoutError(OracleError):
    pass


class ProtocolError(OracleError):
    pass


class EvaluatorDiedError(OracleError):
    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message)
        self.stderr = stderr
