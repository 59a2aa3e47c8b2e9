"""Exception hierarchy mapped onto the CLI exit codes."""


class PsgrError(Exception):
    """Base class for all package errors."""


class ValidationError(PsgrError):
    """Bad inputs, shapes, configs, or file contents (exit code 1)."""


class ShapeError(ValidationError):
    pass


class PstnFormatError(ValidationError):
    """Rejected tensor file: bad magic, version, or dtype code."""


class NumericError(PsgrError):
    """Non-finite values or numerical breakdown (exit code 2)."""


class NotFiniteError(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


class GradcheckFailed(NumericError):
    pass
