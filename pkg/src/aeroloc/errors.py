"""Shared exception hierarchy.

Module-specific errors subclass one of the two branches below so the CLI can
map failures to exit codes: DataError covers malformed or missing inputs
(exit 2), everything else under AeroLocError is a pipeline failure (exit 3).
"""


class AeroLocError(Exception):
    """Base class for all toolkit errors."""


class DataError(AeroLocError):
    """Malformed, inconsistent, or missing input data."""


class ParseError(DataError):
    """A file failed to parse. Carries the path and 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class MissingFile(DataError):
    """One or more referenced files do not exist."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        listing = ", ".join(self.paths)
        super().__init__(f"missing file(s): {listing}")
