"""Exception hierarchy shared by every module."""


class ALIError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ALIError, ValueError):
    """A config value is out of range or inconsistent."""


class ContractViolation(ALIError, ValueError):
    """An input violates an operation's precondition (shape, range, finiteness)."""


class TrainingError(ALIError, RuntimeError):
    """Training diverged or broke a freezing contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class PreconditionError(ALIError, RuntimeError):
    """A required artifact (checkpoint, dataset) is missing or not ready."""


class ProtocolError(ALIError, RuntimeError):
    """An evaluation protocol cannot be set up on the given data."""


class OracleError(ALIError, ArithmeticError):
    """A verification oracle hit a non-finite value."""
