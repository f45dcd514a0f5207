"""Custom exceptions for uscomp.

This module defines a hierarchy of exceptions for the error scenarios that can
occur while loading recordings, fitting models, correcting frames and running
the pipeline. Every error carries an ``exit_code`` used by the command line.
"""

from typing import List, Optional

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class UscompError(Exception):
    """Base exception for all uscomp errors."""

    exit_code = EXIT_VALIDATION


class ValidationError(UscompError):
    """Exception raised when a domain invariant is violated."""

    def __init__(self, message: str, obj=None):
        """Initialize a ValidationError.

        Args:
            message: Error message
            obj: Object that failed validation (optional)
        """
        self.obj = obj
        if obj is not None:
            message = f"{message} (object type: {type(obj).__name__})"
        super().__init__(message)


class DomainError(ValidationError):
    """Exception raised when an argument lies outside the domain of an operation."""


class ConfigError(ValidationError):
    """Exception raised when a pipeline configuration is invalid."""


class SerializationError(UscompError):
    """Exception raised when serialization fails."""

    def __init__(self, message: str, obj_type: str = None, field: str = None):
        """Initialize a SerializationError.

        Args:
            message: Error message
            obj_type: Type of object being serialized (optional)
            field: Field that caused the error (optional)
        """
        self.obj_type = obj_type
        self.field = field
        parts = [message]
        if obj_type:
            parts.append(f"Object type: {obj_type}")
        if field:
            parts.append(f"Field: {field}")
        super().__init__(": ".join(parts))


class DeserializationError(UscompError):
    """Exception raised when deserialization fails."""

    def __init__(self, message: str, obj_type: str = None, field: str = None):
        """Initialize a DeserializationError.

        Args:
            message: Error message
            obj_type: Type of object being deserialized (optional)
            field: Field that caused the error (optional)
        """
        self.obj_type = obj_type
        self.field = field
        parts = [message]
        if obj_type:
            parts.append(f"Object type: {obj_type}")
        if field:
            parts.append(f"Field: {field}")
        super().__init__(": ".join(parts))


class ClassNotFoundError(DeserializationError):
    """Exception raised when a class is not found in the registry."""

    def __init__(self, class_name: str):
        self.class_name = class_name
        super().__init__(
            f"Class '{class_name}' not found in registry. "
            f"This usually means the class was not registered with @register_serializable."
        )


class DepthLimitError(SerializationError):
    """Exception raised when serialization depth limit is exceeded."""

    def __init__(self, max_depth: int, current_depth: int = None):
        self.max_depth = max_depth
        self.current_depth = current_depth
        message = f"Serialization depth limit ({max_depth}) exceeded"
        if current_depth is not None:
            message += f" (current depth: {current_depth})"
        super().__init__(message)


class InvalidFieldError(SerializationError):
    """Exception raised when an invalid field is encountered."""

    def __init__(self, field_name: str, reason: str = None):
        self.field_name = field_name
        message = f"Invalid field '{field_name}'"
        if reason:
            message += f": {reason}"
        super().__init__(message, field=field_name)


class UnknownFieldError(DeserializationError):
    """Exception raised when an unknown field is encountered during deserialization."""

    def __init__(self, field_name: str, obj_type: str):
        self.field_name = field_name
        message = f"Unknown field '{field_name}' in {obj_type}"
        super().__init__(message, obj_type=obj_type, field=field_name)


class RecordingError(UscompError):
    """Exception raised when a sweep recording cannot be loaded or written."""

    def __init__(self, message: str, path: Optional[str] = None):
        """Initialize a RecordingError.

        Args:
            message: Error message
            path: Recording directory or file involved (optional)
        """
        self.path = path
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class MissingFileError(RecordingError):
    """Exception raised when a file of a recording is missing."""


class DimensionMismatchError(RecordingError):
    """Exception raised when a frame does not match the manifest dimensions."""

    def __init__(self, expected, actual, path: Optional[str] = None):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"Frame dimensions {self.actual} do not match manifest {self.expected}", path
        )


class TimestampOrderError(RecordingError):
    """Exception raised when frame timestamps are not strictly increasing."""

    def __init__(self, index: int, previous: float, current: float, path: Optional[str] = None):
        self.index = index
        super().__init__(
            f"Timestamp at frame {index} ({current}) does not exceed previous ({previous})", path
        )


class NegativeForceError(RecordingError):
    """Exception raised when a frame reports a negative contact force."""

    def __init__(self, index: int, force: float, path: Optional[str] = None):
        self.index = index
        self.force = force
        super().__init__(f"Negative contact force {force} N at frame {index}", path)


class NumericalError(UscompError):
    """Base exception for numerical failures (fits, inversions, tracking)."""

    exit_code = EXIT_NUMERICAL


class DegenerateFitError(NumericalError):
    """Exception raised when a least-squares design matrix is rank deficient."""


class NonPhysicalStiffnessError(NumericalError):
    """Exception raised when a fitted force law has non-positive dynamic stiffness."""

    def __init__(self, message: str, indentation: Optional[float] = None):
        self.indentation = indentation
        if indentation is not None:
            message = f"{message} (at lambda_z = {indentation:.4g} mm)"
        super().__init__(message)


class NoFeaturesError(NumericalError):
    """Exception raised when an image holds no trackable features."""


class DivergenceError(NumericalError):
    """Exception raised when the regression optimizer diverges."""

    def __init__(self, iteration: int, trace: List[float]):
        """Initialize a DivergenceError.

        Args:
            iteration: Iteration at which the loss became non-finite
            trace: Loss values recorded up to the failure
        """
        self.iteration = iteration
        self.trace = list(trace)
        tail = ", ".join(f"{v:.3e}" for v in self.trace[-5:])
        super().__init__(f"Regression loss diverged at iteration {iteration} (last: {tail})")


class InversionError(NumericalError):
    """Exception raised when the fixed-point field inversion does not converge."""

    def __init__(self, fraction: float, tolerance: float):
        self.fraction = fraction
        super().__init__(
            f"Field inversion failed to converge on {fraction:.2%} of pixels "
            f"(tolerance {tolerance:g} px)"
        )


class NoVesselError(NumericalError):
    """Exception raised when segmentation finds no vessel."""


class StageError(UscompError):
    """Exception raised when a pipeline stage fails; wraps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_NUMERICAL)
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
