"""Exception types raised across the pipeline."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union


class WrivinderError(Exception):
    """Base class for every error the library raises on bad input or geometry."""


class ParseError(WrivinderError):
    """Malformed or inconsistent input file.

    ``source`` and ``line`` locate the problem when known; they are folded
    into the message so a bare ``str(err)`` is already a usable diagnostic.
    """

    def __init__(self, message: str, source: Optional[Union[str, Path]] = None,
                 line: Optional[int] = None):
        self.source = str(source) if source is not None else None
        self.line = line
        self.reason = message
        where = ""
        if self.source is not None:
            where = self.source
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DanglingReferenceError(ParseError):
    def __init__(self, message: str, ref_id: int, source=None, line=None):
        self.ref_id = ref_id
        super().__init__(message, source, line)


class UnsupportedFormatError(ParseError):
    pass


class TruncatedDataError(ParseError):
    pass


class DimensionMismatchError(WrivinderError):
    def __init__(self, message: str, got: tuple, expected: tuple):
        self.got = got
        self.expected = expected
        super().__init__(message)


class DegenerateGeometryError(WrivinderError):
    """Point configuration cannot support the requested fit (rank deficient, empty extent...)."""


class AmbiguousVerticalError(WrivinderError):
    pass


class NoConsensusError(WrivinderError):
    """RANSAC found no hypothesis with the minimum required support."""


class InsufficientDataError(WrivinderError):
    pass


class ConfigError(WrivinderError):
    pass


class StageError(WrivinderError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
