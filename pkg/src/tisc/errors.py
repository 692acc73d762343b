"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes: configuration problems exit 2,
data/format problems exit 3 and numerical divergence exits 4.
"""


class TiScError(Exception):
    """Base class for all package errors."""


class ConfigError(TiScError, ValueError):
    """An architecture, training or run configuration violates a constraint."""


class ScaleRangeError(ConfigError):
    """A scale, offset or index lies outside the valid range."""


class DataError(TiScError, ValueError):
    """Dataset contents are malformed or incompatible with a model."""


class FormatError(DataError):
    """A binary file (model or dataset) cannot be decoded."""


class ChecksumError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionError(FormatError):
    pass


class DivergenceError(TiScError, ArithmeticError):
    """Training produced a non-finite loss."""
