"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented contract (bad span, unknown id, shape mismatch...)."""


class ParseError(ValidationError):
    """A file could not be parsed; the message names the offending line."""
