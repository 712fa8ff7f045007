"""Exception types shared across the toolkit.

Every error raised on purpose by this package derives from ``LongpplError``
so callers can catch toolkit failures without masking programming bugs.
Plain ``ValueError`` is still used for violated call contracts (bad
arguments, malformed in-memory data).
"""

from __future__ import annotations


class LongpplError(Exception):
    """Base class for all toolkit-specific errors."""


class ConfigError(LongpplError):
    """Invalid configuration: bad hyperparameters, malformed vocab or
    merges tables, inconsistent training settings."""


class ScoringError(LongpplError):
    """A scoring backend failed to produce a usable log-probability
    (transport failure, exhausted retries, missing value).

    Carries ``token_index`` when the failure is tied to a specific
    token position, else ``None``.
    """

    def __init__(self, message: str, token_index: int | None = None):
        super().__init__(message)
        self.token_index = token_index


class ProtocolError(LongpplError):
    """A remote scoring endpoint violated the wire contract
    (wrong token count, malformed payload, out-of-range values)."""


class DumpFormatError(LongpplError):
    """A score dump file violates the JSONL schema.

    Carries ``line_number`` (1-based) when the offending line is known.
    """

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class UndefinedMetricError(LongpplError):
    """A metric has no defined value for the given input (for example a
    perplexity over zero selected tokens, or a correlation over a
    zero-variance column).

    Carries ``n_key_tokens`` when the cause is an empty key-token set.
    """

    def __init__(self, message: str, n_key_tokens: int | None = None):
        super().__init__(message)
        self.n_key_tokens = n_key_tokens


class AlignmentError(LongpplError):
    """Two tokenizations cannot be aligned (different source texts or
    inconsistent span coverage)."""


class TrainingError(LongpplError):
    """Training failed (non-finite loss, divergence).

    Carries ``step`` (0-based optimizer step) when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
