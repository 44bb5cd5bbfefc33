"""Exception family for the package.

Everything raised deliberately derives from MadvitError so the CLI can map
library failures to a single exit code while argument/usage problems keep
their own types.
"""


class MadvitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MadvitError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(MadvitError):
    """A configuration value is outside the supported set."""


class ConfigKeyError(ConfigurationError):
    """A config file or override names a key that does not exist."""


class UsageError(MadvitError):
    """An API was called in a way its contract forbids."""


class DataError(MadvitError):
    """A dataset violates its invariants (empty class, bad range, ...)."""


class ContractError(MadvitError):
    """An input fails a mathematical precondition (e.g. non-stochastic rows)."""


class DivergenceError(MadvitError):
    """Training produced a non-finite loss."""
