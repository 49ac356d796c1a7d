class ValidationError(ValueError):
    """Input violates a structural invariant (bad ids, non-adjacent roads, ...)."""


class ParseError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
