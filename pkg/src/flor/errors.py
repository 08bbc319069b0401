"""Exception hierarchy. Every domain failure derives from :class:`FlorError`."""

from __future__ import annotations


class FlorError(Exception):
    """Base class for domain errors (reported by the CLI with exit code 1)."""


class NotFoundError(FlorError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class IntegrityError(FlorError):
    """A row would violate referential integrity or uniqueness."""


class ProtocolError(FlorError):
    """An event stream is malformed or badly nested."""


class ParseError(FlorError):
    def __init__(self, message: str, lineno: int | None = None) -> None:
        self.lineno = lineno
        self.message = message
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class UnsupportedConstructError(ParseError):
    pass


class CycleError(FlorError):
    def __init__(self, cycle: list[str]) -> None:
        self.cycle = cycle
        super().__init__("dependency cycle: " + " -> ".join(cycle))


class MissingSourceError(FlorError):
    pass


class DataError(FlorError):
    pass


class RepositoryError(FlorError):
    pass


class LockedError(FlorError):
    pass
