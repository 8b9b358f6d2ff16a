"""Shared exception types and process exit codes."""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3


class ConfigError(ValueError):
    """Invalid configuration: bad field values, missing inputs, illegal stage order.

    Maps to exit code 2 at the CLI boundary.
    """


class StageError(RuntimeError):
    """A stage failed at runtime on otherwise valid configuration.

    Maps to exit code 3 at the CLI boundary.
    """


class LedgerError(StageError):
    """Manifest accounting violated: a stage's counts do not add up or do not chain."""


class TransportError(StageError):
    """A client request failed. retryable=False means retrying cannot help."""

    def __init__(self, message: str, *, retryable: bool = True) -> None:
        super().__init__(message)
        self.retryable = retryable


class AuthError(TransportError):
    """Credentials rejected by the endpoint. Always fatal, never retried."""

    def __init__(self, message: str) -> None:
        super().__init__(message, retryable=False)
