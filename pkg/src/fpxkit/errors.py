"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI and scripts
can branch on it without parsing messages.
"""

from __future__ import annotations


class FpxError(Exception):
    code = "fpx-error"

    def __init__(self, message: str, *, offset: int | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.offset = offset

    def __str__(self) -> str:
        if self.offset is None:
            return f"[{self.code}] {self.message}"
        return f"[{self.code}] {self.message} (at byte offset {self.offset})"


class InvalidFormatError(FpxError, ValueError):
    code = "invalid-format"


class InvalidCodeError(FpxError, ValueError):
    code = "invalid-code"


class InvalidValueError(FpxError, ValueError):
    code = "invalid-value"


class ScaleOverflowError(FpxError, ValueError):
    code = "scale-overflow"


class LayoutError(FpxError, ValueError):
    """Shape, padding or index problems in the packed layout."""

    code = "layout"


class TraceError(FpxError, AssertionError):
    code = "trace-invariant"


class CorruptFileError(FpxError, IOError):
    code = "corrupt-file"
