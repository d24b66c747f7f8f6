"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class DascsegError(Exception):
    """Base class for all package errors."""


class ConfigError(DascsegError):
    """Invalid or inconsistent run configuration."""


class DataError(DascsegError):
    """Unreadable, malformed, or contract-violating input data."""


class NumericalAbortError(DascsegError):
    """Training aborted on a non-finite loss; a diagnostic snapshot is written first."""
