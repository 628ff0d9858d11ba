"""
Custom exception types for the wsol package.

Provides specific exception classes for the engine, configuration, data and
numerical error categories so that callers (and the CLI exit codes) can tell
them apart.
"""

from typing import Any, Dict, Optional, Sequence


class WsolException(Exception):
    """Base exception for all wsol-specific errors."""

    exit_code: int = 2

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        cause: Optional[Exception] = None
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.context = context or {}
        self.cause = cause

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to dictionary for JSON serialization."""
        return {
            "error_type": self.__class__.__name__,
            "message": self.message,
            "error_code": self.error_code,
            "context": self.context,
            "cause": str(self.cause) if self.cause else None
        }


# Engine-related exceptions
class EngineException(WsolException):
    """Base class for autodiff and model contract violations."""
    exit_code = 2


class DimensionError(EngineException):
    """Raised when tensor shapes are incompatible with an operation."""

    def __init__(self, operation: str, detail: str, shapes: Sequence[Sequence[int]] = ()):
        super().__init__(
            f"{operation}: {detail}",
            error_code="DIMENSION_MISMATCH",
            context={"operation": operation, "shapes": [list(s) for s in shapes]}
        )


class LabelIndexError(EngineException, IndexError):
    """Raised when a class label is outside [0, num_classes)."""

    def __init__(self, label: int, num_classes: int):
        super().__init__(
            f"Label {label} out of range for {num_classes} classes",
            error_code="LABEL_OUT_OF_RANGE",
            context={"label": label, "num_classes": num_classes}
        )


class ContractError(EngineException):
    """Raised when a precondition of an operation is not met."""

    def __init__(self, operation: str, detail: str):
        super().__init__(
            f"{operation}: {detail}",
            error_code="CONTRACT_VIOLATION",
            context={"operation": operation}
        )


class TapeStateError(EngineException):
    """Raised when a tape is replayed after it has been consumed."""

    def __init__(self, detail: str):
        super().__init__(
            f"Tape state error: {detail}",
            error_code="TAPE_STATE",
            context={}
        )


# Configuration-related exceptions
class ConfigurationException(WsolException):
    """Base class for configuration-related errors."""
    exit_code = 2


class InvalidConfigurationError(ConfigurationException):
    """Raised when configuration is invalid."""

    def __init__(self, config_key: str, config_value: Any, expected: str):
        super().__init__(
            f"Invalid configuration for '{config_key}': "
            f"expected {expected}, got {config_value!r}",
            error_code="INVALID_CONFIGURATION",
            context={
                "config_key": config_key,
                "config_value": str(config_value),
                "expected": expected
            }
        )


class ConfigFileError(ConfigurationException):
    """Raised when a `key = value` config file line cannot be applied."""

    def __init__(self, path: str, line_number: int, detail: str):
        super().__init__(
            f"{path}:{line_number}: {detail}",
            error_code="CONFIG_FILE_INVALID",
            context={"path": path, "line_number": line_number}
        )
        self.line_number = line_number


class UsageError(ConfigurationException):
    """Raised for command-line usage errors."""
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail, error_code="USAGE", context={})


# Data-related exceptions
class DataException(WsolException):
    """Base class for dataset and checkpoint I/O errors."""
    exit_code = 2


class DataLoadError(DataException):
    """Raised when a dataset directory cannot be loaded."""

    def __init__(self, path: str, detail: str, line_number: Optional[int] = None):
        where = f"{path}:{line_number}" if line_number is not None else path
        super().__init__(
            f"Failed to load dataset ({where}): {detail}",
            error_code="DATA_LOAD_FAILED",
            context={"path": path, "line_number": line_number}
        )
        self.line_number = line_number


class CheckpointError(DataException):
    """Raised when a checkpoint is malformed."""

    def __init__(self, path: str, field: str, detail: str):
        super().__init__(
            f"Invalid checkpoint {path}: field '{field}': {detail}",
            error_code="CHECKPOINT_INVALID",
            context={"path": path, "field": field}
        )
        self.field = field


# Numerical exceptions
class NumericalException(WsolException):
    """Base class for numerical failures."""
    exit_code = 3


class NumericalInstabilityError(NumericalException):
    """Raised when a loss term or activation becomes non-finite."""

    def __init__(self, term: str, epoch: Optional[int] = None, value: Optional[float] = None):
        super().__init__(
            f"Non-finite value in '{term}'" + (f" at epoch {epoch}" if epoch is not None else ""),
            error_code="NON_FINITE",
            context={"term": term, "epoch": epoch, "value": value}
        )
        self.term = term
