"""Exception hierarchy shared across the package."""


class BidfcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BidfcError):
    """Invalid configuration value (bad range, unknown identifier, ...)."""


class InputError(BidfcError):
    """Runtime input violates an operation's preconditions."""


class IngestionError(InputError):
    """A data file could not be read or has an unsupported format."""


class NumericError(BidfcError):
    """Training produced a non-finite value."""
