"""Shared exception types."""

from __future__ import annotations


class ParseError(Exception):
    """Raised on malformed program or report text; carries position info."""

    def __init__(self, message: str, line: int = 0, column: int = 0, token: str = ""):
        self.message = message
        self.line = line
        self.column = column
        self.token = token
        super().__init__(str(self))

    def __str__(self) -> str:
        loc = f"line {self.line}, col {self.column}: " if self.line else ""
        tok = f" (at {self.token!r})" if self.token else ""
        return f"{loc}{self.message}{tok}"


class TemplateError(ParseError):
    """Malformed double-brace template text."""


class UnboundVariable(Exception):
    """A template variable had no binding at substitution time.

    Unreachable for programs that passed the well-formedness check; treated
    as a fatal internal fault rather than a recoverable condition.
    """
