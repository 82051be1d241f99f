"""Exception hierarchy for the confusion-subnets toolkit.

Everything derives from ``ValueError`` so callers that only know about
``ValueError`` (pydantic, the CLI, the API layer) keep catching it.
"""
from typing import Optional


class ConfNetError(ValueError):
    """Base class for all toolkit errors."""


class InvalidInputError(ConfNetError):
    """Non-finite numbers, empty inputs or otherwise unusable values."""


class ShapeError(ConfNetError):
    """Array shapes or lengths do not line up."""


class RangeError(ConfNetError):
    """An index or step lies outside its admissible range."""


class InvalidLabelError(ConfNetError):
    """A class label is outside the label space it is used in."""


class GenerationError(ConfNetError):
    """Synthetic data could not be generated for the requested geometry."""


class InvalidPartitionError(ConfNetError):
    """Confusing groups overlap or reference unknown classes."""


class ParseError(ConfNetError):
    """A text artifact is malformed."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: " if where else f"line {line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class StageError(ConfNetError):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
