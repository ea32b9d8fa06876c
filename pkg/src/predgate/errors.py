"""Exception hierarchy shared across the package."""


class PredgateError(Exception):
    """Base class for all package errors."""


class ConfigError(PredgateError, ValueError):
    """Inconsistent shapes, dimensions or configuration values."""


class UsageError(PredgateError, RuntimeError):
    """An API was called in a state or with arguments it does not accept."""


class TrainingError(PredgateError, RuntimeError):
    """Optimization aborted, e.g. because a gradient became non-finite."""


class FormatError(PredgateError, ValueError):
    """A binary container file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
