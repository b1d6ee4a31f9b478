"""Progressive pseudo-label sampling for one-shot metric learning."""

from pls_reid.errors import (
    DimensionMismatchError,
    InfeasibleBatchError,
    InvalidParameterError,
    MalformedFileError,
    MissingTranslatorError,
    PlsError,
    StaleActivationError,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatchError",
    "InfeasibleBatchError",
    "InvalidParameterError",
    "MalformedFileError",
    "MissingTranslatorError",
    "PlsError",
    "StaleActivationError",
    "__version__",
]
