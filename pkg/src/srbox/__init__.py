"""Structure mining from annotated text and box-embedding reasoning over query DAGs."""

from srbox.errors import ParseError, ValidationError

__version__ = "0.1.0"

__all__ = ["ParseError", "ValidationError", "__version__"]
