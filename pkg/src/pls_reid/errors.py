class PlsError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(PlsError, ValueError):
    pass


class DimensionMismatchError(PlsError, ValueError):
    pass


class MalformedFileError(PlsError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class StaleActivationError(PlsError, RuntimeError):
    """Backward called with gradients that do not match the recorded forward pass."""


class InfeasibleBatchError(PlsError, RuntimeError):
    pass


class MissingTranslatorError(PlsError, KeyError):
    pass
