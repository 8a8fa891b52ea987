"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: config/usage problems exit 1, data
ingestion problems exit 2, numeric failures exit 3.
"""


class DapaError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(DapaError):
    """Invalid configuration value or config file."""

    exit_code = 1


class UsageError(DapaError):
    """An API contract was violated by the caller."""

    exit_code = 1


class DimensionError(UsageError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(DapaError):
    """Corpus ingestion failure: missing files, bad rows, bad labels."""

    exit_code = 2


class FormatError(DataError):
    """A tensor/label/manifest file violates its on-disk format."""


class DomainLookupError(DataError):
    """A sample references a domain the model has no prompt for."""


class NumericError(DapaError):
    """Non-finite values or a failed gradient verification."""

    exit_code = 3
