"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
UnattainablePrivacyError / GridSizeError -> 3, DataError -> 4.
"""


class DpIcdError(Exception):
    """Base class for all package errors."""


class ConfigError(DpIcdError):
    """Invalid experiment configuration; message names the offending key path."""


class UnattainablePrivacyError(DpIcdError):
    """A privacy target cannot be met (by calibration or by the current grid)."""


class GridSizeError(DpIcdError):
    """A privacy-loss grid would exceed the configured resource limit."""


class DataError(DpIcdError):
    """Corpus or dataset violates a pipeline precondition."""
