"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, NumericError -> 2,
MissingArtifactError -> 3.
"""


class WarpDistillError(Exception):
    """Base class for all package errors."""


class UsageError(WarpDistillError):
    """Bad arguments, malformed config, or misuse of an API contract."""


class NumericError(WarpDistillError):
    """Non-finite values, failed gradient checks, diverging training."""


class MissingArtifactError(WarpDistillError):
    """A required file (corpus, vocab, checkpoint) does not exist."""
