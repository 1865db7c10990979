"""
CAAC Lab Error Hierarchy
Every failure the services raise, with the exit code the CLI maps it to
"""

from typing import Any, Dict, Optional


class CaacError(Exception):
    """Base class for all lab errors."""

    exit_code: int = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class ConfigError(CaacError):
    """Invalid run configuration or command-line flags."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, **context: Any):
        if field is not None:
            context["field"] = field
        super().__init__(message, **context)
        self.field = field


class FingerprintMismatchError(ConfigError):
    """A calibration file was built for a different model or world."""


class DomainError(CaacError):
    """A precondition of an operation was violated."""

    exit_code = 2


class SequenceLengthError(DomainError):
    """Token sequence longer than the model allows."""


class NumericError(CaacError):
    """A non-finite value appeared during computation."""

    exit_code = 3

    def __init__(
        self,
        message: str,
        layer: Optional[int] = None,
        head: Optional[int] = None,
        **context: Any,
    ):
        if layer is not None:
            context["layer"] = layer
        if head is not None:
            context["head"] = head
        super().__init__(message, **context)
        self.layer = layer
        self.head = head


class GenerationAborted(NumericError):
    """Numeric failure mid-generation; keeps every step completed so far."""

    def __init__(self, cause: NumericError, partial_trace: Any):
        super().__init__(
            f"generation aborted: {cause.message}",
            layer=cause.layer,
            head=cause.head,
            completed_steps=len(partial_trace.steps),
        )
        self.cause = cause
        self.partial_trace = partial_trace


class MissingArtifactError(CaacError):
    """A required input file (calibration, traces) does not exist."""

    exit_code = 4
