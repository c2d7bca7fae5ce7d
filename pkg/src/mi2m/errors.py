"""Exception hierarchy. Each class carries the process exit code the CLI maps it to."""


class MI2MError(Exception):
    exit_code = 2


class ArgumentError(MI2MError, ValueError):
    exit_code = 1


class ValidationError(MI2MError, ValueError):
    exit_code = 2


class GeometryError(ValidationError):
    pass


class DataLoadError(MI2MError, OSError):
    exit_code = 2


class ConfigurationError(MI2MError):
    exit_code = 2


class ProtocolViolation(MI2MError):
    exit_code = 2


class CheckpointError(MI2MError):
    exit_code = 2


class NumericError(MI2MError, ArithmeticError):
    exit_code = 3


class ShapeError(ValidationError):
    pass
