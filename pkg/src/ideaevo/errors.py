"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class IdeaEvoError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(IdeaEvoError, ValueError):
    """An argument violated a documented precondition."""


class NotFound(IdeaEvoError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DuplicateDiscipline(IdeaEvoError):
    pass


class EmbeddingMissing(IdeaEvoError):
    def __init__(self, entity_id: str):
        super().__init__(f"no embedding for {entity_id}")
        self.entity_id = entity_id


class FormatError(IdeaEvoError):
    """A file could not be parsed. ``offset`` is a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(IdeaEvoError):
    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


class ConfigError(IdeaEvoError):
    pass


class SourceUnavailable(IdeaEvoError):
    retryable = True


class ProviderError(IdeaEvoError):
    """A backend kept failing after all retries were spent."""

    def __init__(self, message: str, status: int | str | None = None):
        super().__init__(message)
        self.status = status


class RequestError(IdeaEvoError):
    """Non-retryable client-side rejection (4xx other than 429)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ParseError(IdeaEvoError):
    def __init__(self, message: str, excerpt: str = ""):
        super().__init__(f"{message}: {excerpt!r}" if excerpt else message)
        self.excerpt = excerpt


class SchemaError(IdeaEvoError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"{field}: {detail}" if detail else field)
        self.field = field


class GroundingError(IdeaEvoError):
    pass


class GenerationError(IdeaEvoError):
    def __init__(self, message: str, parsed_count: int):
        super().__init__(f"{message} (parsed {parsed_count})")
        self.parsed_count = parsed_count


class ReviewError(IdeaEvoError):
    def __init__(self, idea_id: str, cause: Exception | None = None):
        super().__init__(f"review failed for {idea_id}" + (f": {cause}" if cause else ""))
        self.idea_id = idea_id


class RunHalted(IdeaEvoError):
    """The pipeline stopped on an unrecoverable fault; a checkpoint was left behind."""

    def __init__(self, message: str, checkpoint: str, completed_rounds: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.completed_rounds = completed_rounds
