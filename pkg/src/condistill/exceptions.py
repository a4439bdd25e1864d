"""Exception hierarchy. CLI exit codes map onto the three top-level kinds."""


class CondistillError(Exception):
    """Base class for all package errors."""


class ConfigError(CondistillError, ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DataError(CondistillError):
    """Missing, malformed or inconsistent data on disk (exit code 3)."""


class FormatError(DataError):
    """A file does not follow its container format."""


class ManifestError(DataError):
    """Manifest missing or inconsistent with the files it references."""


class CheckpointError(DataError):
    """Checkpoint version or architecture mismatch."""


class NumericError(CondistillError, ArithmeticError):
    """NaN or Inf detected where finite values are required (exit code 4)."""


class StageError(CondistillError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def exit_code(exc: BaseException) -> int:
    """Process exit code for an exception: 2 config, 3 data, 4 numeric, 1 otherwise."""
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, NumericError):
        return 4
    if isinstance(exc, (DataError, FileNotFoundError)):
        return 3
    if isinstance(exc, ConfigError):
        return 2
    return 1
