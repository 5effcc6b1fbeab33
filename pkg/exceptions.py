"""Custom exceptions for the sleep stager.

This module defines a hierarchy of exceptions to provide better error handling
and more informative error messages throughout the toolkit.
"""

from typing import Any, Optional, Sequence, Tuple


class SleepStagerError(Exception):
    """Base exception for all sleep-stager errors.

    Catching this exception will catch all toolkit-specific errors.
    """

    def __init__(self, message: str, details: Optional[str] = None):
        """Initialize the exception.

        Args:
            message: Main error message
            details: Additional error details
        """
        self.message = message
        self.details = details
        super().__init__(self.format_message())

    def format_message(self) -> str:
        """Format the complete error message.

        Returns:
            Formatted error message with details if available
        """
        if self.details:
            return f"{self.message}: {self.details}"
        return self.message


class ShapeError(SleepStagerError):
    """Exception raised when operand dimensions do not agree."""

    def __init__(
        self,
        operation: str,
        shapes: Sequence[Tuple[int, ...]],
        details: Optional[str] = None
    ):
        """Initialize the shape error.

        Args:
            operation: Operation that rejected its operands
            shapes: Shapes of every operand involved
            details: Additional error details
        """
        shown = ", ".join(str(tuple(s)) for s in shapes)
        message = f"Dimension mismatch in {operation} for shapes {shown}"
        super().__init__(message, details)
        self.operation = operation
        self.shapes = [tuple(s) for s in shapes]


class EdfParseError(SleepStagerError):
    """Exception raised when an EDF file cannot be decoded.

    The byte offset points at the field or record that failed.
    """

    def __init__(self, offset: int, details: Optional[str] = None):
        """Initialize the EDF parse error.

        Args:
            offset: Byte offset where parsing failed
            details: Additional error details
        """
        message = f"Malformed EDF data at byte offset {offset}"
        super().__init__(message, details)
        self.offset = offset


class AnnotationError(SleepStagerError):
    """Exception raised when an EDF+ annotation record is unparseable."""

    def __init__(self, record_index: int, details: Optional[str] = None):
        """Initialize the annotation error.

        Args:
            record_index: Index of the data record holding the bad TAL
            details: Additional error details
        """
        message = f"Unparseable annotation in record {record_index}"
        super().__init__(message, details)
        self.record_index = record_index


class LabelMappingError(SleepStagerError):
    """Exception raised for stage labels outside the known vocabulary."""

    def __init__(self, label: str, standard: str):
        """Initialize the label mapping error.

        Args:
            label: Offending raw label text
            standard: Scoring standard in use (AASM or RK)
        """
        message = f"Unknown sleep stage label '{label}' under {standard}"
        super().__init__(message)
        self.label = label
        self.standard = standard


class DataPreparationError(SleepStagerError):
    """Exception raised when a recording cannot be turned into epochs.

    This includes recordings with no sleep, missing stages for
    oversampling and signals shorter than their hypnogram.
    """

    def __init__(self, subject_id: str, details: Optional[str] = None):
        """Initialize the data preparation error.

        Args:
            subject_id: Subject or recording being prepared
            details: Additional error details
        """
        message = f"Failed to prepare data for '{subject_id}'"
        super().__init__(message, details)
        self.subject_id = subject_id


class ConfigurationError(SleepStagerError):
    """Exception raised when configuration is invalid or missing."""

    def __init__(self, config_name: str, details: Optional[str] = None):
        """Initialize the configuration error.

        Args:
            config_name: Name of the configuration that is invalid
            details: Additional error details
        """
        message = f"Invalid or missing configuration: {config_name}"
        super().__init__(message, details)
        self.config_name = config_name


class ValidationError(SleepStagerError):
    """Exception raised when an argument fails validation."""

    def __init__(self, field_name: str, value: Any, details: Optional[str] = None):
        """Initialize the validation error.

        Args:
            field_name: Name of the field that failed validation
            value: Invalid value
            details: Additional validation error details
        """
        message = f"Validation failed for {field_name}: {value}"
        super().__init__(message, details)
        self.field_name = field_name
        self.value = value


class TrainingError(SleepStagerError):
    """Exception raised when an optimizer step cannot proceed."""

    def __init__(self, parameter: str, details: Optional[str] = None):
        """Initialize the training error.

        Args:
            parameter: Name of the parameter whose update failed
            details: Additional error details
        """
        message = f"Training aborted at parameter '{parameter}'"
        super().__init__(message, details)
        self.parameter = parameter


class CheckpointError(SleepStagerError):
    """Exception raised for missing, corrupt or incompatible checkpoints."""

    def __init__(self, path: str, details: Optional[str] = None):
        """Initialize the checkpoint error.

        Args:
            path: Checkpoint or cache file involved
            details: Additional error details
        """
        message = f"Unusable archive '{path}'"
        super().__init__(message, details)
        self.path = path


class MissingPrerequisiteError(SleepStagerError):
    """Exception raised when a command runs before its inputs exist."""

    def __init__(self, artifact: str, path: str):
        """Initialize the missing prerequisite error.

        Args:
            artifact: Human name of the required artifact
            path: Where the artifact was expected
        """
        message = f"Missing {artifact}"
        super().__init__(message, f"expected at {path}")
        self.artifact = artifact
        self.path = path


class FoldError(SleepStagerError):
    """Exception raised when a cross-validation fold fails."""

    def __init__(self, fold_index: int, details: Optional[str] = None):
        """Initialize the fold error.

        Args:
            fold_index: Index of the failed fold
            details: Additional error details
        """
        message = f"Cross-validation fold {fold_index} failed"
        super().__init__(message, details)
        self.fold_index = fold_index


class MetricsError(SleepStagerError):
    """Exception raised when a metric is undefined for its input."""

    def __init__(self, metric: str, details: Optional[str] = None):
        """Initialize the metrics error.

        Args:
            metric: Metric that could not be computed
            details: Additional error details
        """
        message = f"Cannot compute {metric}"
        super().__init__(message, details)
        self.metric = metric


class FileOperationError(SleepStagerError):
    """Exception raised when file operations fail."""

    def __init__(
        self,
        operation: str,
        filename: str,
        details: Optional[str] = None
    ):
        """Initialize the file operation error.

        Args:
            operation: Operation that failed (read, write, etc.)
            filename: File involved in the operation
            details: Additional error details
        """
        message = f"Failed to {operation} file '{filename}'"
        super().__init__(message, details)
        self.operation = operation
        self.filename = filename
