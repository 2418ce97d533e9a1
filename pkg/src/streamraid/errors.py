"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Everything raised on purpose anywhere
in the package derives from StreamraidError so callers can catch one base.
"""


class StreamraidError(Exception):
    """Base class for every error this package raises deliberately."""


class ConfigError(StreamraidError):
    """Invalid configuration: bad field values, contradictory flags, unknown keys."""


class DataError(StreamraidError):
    """Malformed or inconsistent input data (files, arrays, schemas)."""


class NumericError(StreamraidError):
    """A computation produced non-finite values or diverged."""
