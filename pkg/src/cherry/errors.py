"""Exception hierarchy. Each top-level class maps to one CLI exit code."""

from __future__ import annotations


class CherryError(Exception):
    exit_code = 1
    phase: str | None = None


class ConfigError(CherryError, ValueError):
    exit_code = 2


class DataError(CherryError, ValueError):
    exit_code = 3


class BackendError(CherryError, RuntimeError):
    """Remote backend failure.

    ``attempts`` is how many requests were made; ``retryable`` tells the
    caller whether the last failure looked transient (timeouts, 5xx, 429).
    """

    exit_code = 4

    def __init__(self, message: str, *, attempts: int = 0, retryable: bool = False,
                 status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable
        self.status = status


class DatasetParseError(DataError):
    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


class EmptyAnswerError(DataError):
    pass


class EmbeddingError(DataError):
    pass


class DomainError(DataError):
    pass


class JudgeParseError(DataError):
    def __init__(self, message: str, raw_line: str):
        super().__init__(f"{message}: {raw_line!r}")
        self.raw_line = raw_line
