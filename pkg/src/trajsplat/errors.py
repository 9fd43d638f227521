"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError` (a
``ValueError``) so the CLI can map it to exit code 1; filesystem problems
stay ``OSError`` and map to exit code 2.
"""


class ValidationError(ValueError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class IntegrityError(ValidationError):
    """Cross-reference between records does not resolve."""


class ImageFormatError(ValidationError):
    pass


class DegenerateGeometryError(ValidationError):
    pass


class WorkspaceError(ValidationError):
    """Workspace precondition failed (missing stage output, hash mismatch)."""
