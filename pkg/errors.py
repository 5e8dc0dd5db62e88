"""Exception hierarchy shared by every pipeline stage.

Each error also subclasses the closest builtin so callers that only know about
ValueError / RuntimeError keep working.
"""
from typing import Any, Dict, List, Optional, Sequence


class TeegError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(TeegError, ValueError):
    def __init__(self, op: str, message: str, dims: Optional[Sequence[Any]] = None):
        self.op = op
        self.dims = list(dims) if dims is not None else []
        detail = f" (dims: {self.dims})" if self.dims else ""
        super().__init__(f"{op}: {message}{detail}")


class GraphError(TeegError, RuntimeError):
    pass


class CheckpointError(TeegError, ValueError):
    pass


class EdfFormatError(TeegError, ValueError):
    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class AnnotationError(TeegError, ValueError):
    pass


class MontageError(TeegError, ValueError):
    def __init__(self, missing: List[str], source: str = ""):
        self.missing = list(missing)
        where = f" in {source}" if source else ""
        super().__init__(f"montage incomplete{where}: missing {', '.join(self.missing)}")


class TimelineMetadataError(TeegError, ValueError):
    pass


class ProtocolError(TeegError, ValueError):
    pass


class FilterDesignError(TeegError, ValueError):
    pass


class ConfigError(TeegError, ValueError):
    pass


class StaleStateError(TeegError, RuntimeError):
    pass


class TrainingError(TeegError, RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class EligibilityError(TeegError):
    def __init__(self, subject_id: str, reason: str):
        self.subject_id = subject_id
        self.reason = reason
        super().__init__(f"subject {subject_id} excluded: {reason}")


class EvaluationError(TeegError, ValueError):
    pass
