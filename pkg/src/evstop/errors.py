"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: bad input data is not the same failure as a bad flag.
"""


class EvstopError(Exception):
    """Base class for all errors raised by this package."""


class DataError(EvstopError):
    """Malformed, inconsistent, or degenerate input data (CLI exit code 2)."""


class ConfigError(EvstopError):
    """Invalid configuration or unsatisfiable option combination (exit code 3)."""


class UsageError(EvstopError):
    """API misuse, e.g. stepping a process that already stopped (exit code 4)."""


class InvariantError(EvstopError):
    """An internal invariant failed to hold; indicates a bug (exit code 4)."""
