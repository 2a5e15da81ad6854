"""Shared exception types for the validation pipeline."""


class SudvalError(Exception):
    """Base class for all pipeline errors."""


class IngestionError(SudvalError):
    """An input file could not be read."""


class ValidationError(SudvalError):
    """A record or record set violates a corpus invariant."""


class UnresolvedReferenceError(SudvalError):
    """A record references an id that does not resolve in the corpus."""


class ConfigError(SudvalError):
    """Invalid configuration, including non-retryable HTTP 4xx responses."""


class TransportError(SudvalError):
    """A remote provider failed after exhausting retries."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class SchemaError(SudvalError):
    """Model output did not contain a parseable schema object.

    Carries the raw model text for audit.
    """

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class UndefinedMetricError(SudvalError):
    """A metric is undefined for the given input (empty set, single class, pe=1)."""


class PatternCompileError(SudvalError):
    """A rule pattern failed to compile as a regular expression."""

    def __init__(self, pattern: str, reason: str):
        super().__init__(f"pattern {pattern!r} does not compile: {reason}")
        self.pattern = pattern


class EmptyNoteError(SudvalError):
    """Grounding was asked to score against an empty note."""


class NotFoundError(SudvalError):
    """A referenced review case or resource does not exist."""


class StageError(SudvalError):
    """A pipeline stage failed; partial run artifacts are preserved."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
