"""
Exception hierarchy for Interleave-MT.
main.py maps these to process exit codes.
"""
from __future__ import annotations

from typing import Optional


class InterleaveMTError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(InterleaveMTError, ValueError):
    """Invalid or inconsistent configuration (exit code 1)."""


class DataError(InterleaveMTError, ValueError):
    """Input data violates a precondition (exit code 2)."""


class ParseError(DataError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DivergenceError(InterleaveMTError, RuntimeError):
    """Training produced a non-finite loss (exit code 3)."""


class StageError(InterleaveMTError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
