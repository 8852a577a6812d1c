"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto its exit-status contract: usage problems exit 1,
data/IO problems exit 2, numerical failures exit 3.
"""


class CharAdapterError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CharAdapterError):
    """Bad command-line invocation: unknown verb, unknown flag, bad flag value."""


class DataError(CharAdapterError):
    """Bad input data: missing/corrupt files, config typos, schema violations."""


class NumericalError(CharAdapterError):
    """Numerical failure: non-finite loss, gradient check over tolerance."""
