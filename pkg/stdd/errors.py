"""
Exception types shared by every stdd module.

All errors derive from STDDError so callers (the CLI in particular) can
map them onto exit codes without knowing which module raised them.
"""


class STDDError(Exception):
    """Base class for all stdd errors."""


class DimensionError(STDDError):
    """Raised when tensor shapes or row counts do not line up."""


class ConfigurationError(STDDError):
    """
    Raised when a configuration value is invalid.

    Attributes:
        key (str | None): The configuration key that caused the error, if known
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class ValidationError(STDDError):
    """Raised when an argument fails a precondition check."""


class ParseError(STDDError):
    """
    Raised when an LLM response cannot be parsed.

    Attributes:
        diagnostics (list[str]): One entry per offending or inspected line
    """

    def __init__(self, message, diagnostics=None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            message = message + "\n" + "\n".join(self.diagnostics)
        super().__init__(message)


class ContractError(STDDError):
    """Raised when a caller breaks an API contract (e.g. backward on a non-scalar)."""


class NaNPropagationError(STDDError):
    """Raised when NaN values reach an operation that refuses them."""


class ReportIOError(STDDError):
    """Raised when a required input file is missing or an output cannot be written."""


class InvariantError(STDDError):
    """Raised when two derivations of the same quantity disagree."""
