"""Exception hierarchy; the CLI maps each class to an exit code."""


class StmixError(Exception):
    """Base class for package errors."""


class InvalidParameterError(StmixError, ValueError):
    """A distribution or model parameter is outside its domain."""


class DataError(StmixError):
    """Malformed or inconsistent input data (exit code 2)."""


class NumericalError(StmixError):
    """A numerical routine failed: factorisation, root bracketing, degenerate weights (exit code 3)."""


class ConfigurationError(NumericalError):
    """Model configuration incompatible with the inputs, e.g. a non-SPD precision on the rho grid."""
