"""Exceptions raised across the toolkit.

Everything derives from ``CFRLError``. Value problems also derive from
``ValueError`` and state problems from ``RuntimeError``, so callers that only
know the builtin types still catch them.
"""


class CFRLError(Exception):
    """Base class for every error raised by this package."""


# ---- Data errors ----

class SchemaError(CFRLError, ValueError):
    """A required column is missing or the table layout is wrong."""


class RaggedDataError(CFRLError, ValueError):
    """An individual does not have exactly T+1 rows."""


class DataValueError(CFRLError, ValueError):
    """A cell holds a missing, non-finite, non-integer or out-of-range value."""


class SizeError(CFRLError, ValueError):
    """Too few individuals, samples or folds for the requested operation."""


class ShapeError(CFRLError, ValueError):
    """Array widths do not match what a fitted model expects."""


class DomainError(CFRLError, ValueError):
    """A sensitive attribute or action lies outside its declared space."""


# ---- Configuration and state errors ----

class ConfigurationError(CFRLError, ValueError):
    """Options that cannot be used together."""


class UnsupportedModeError(ConfigurationError):
    """A preprocessing mode that is not implemented."""


class NotFittedError(CFRLError, RuntimeError):
    """A model, agent or environment was used before training."""


class NonConvergenceError(CFRLError, ArithmeticError):
    """An iterative fit produced non-finite values."""


class SerializationError(CFRLError, ValueError):
    """An artifact cannot be written or does not decode."""
