"""Exception types shared across the package.

Every error raised on purpose by this package derives from MetagxError, so
callers (and the command-line layer) can distinguish usage problems from
genuine bugs. Each subclass marks one failure family; messages carry the
offending names, shapes, or line numbers.
"""


class MetagxError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MetagxError):
    """Operands or arrays have incompatible shapes for the requested op."""


class ParseError(MetagxError):
    """An input file does not follow the expected format."""


class SelectionError(MetagxError):
    """Gene selection produced an empty or inconsistent result."""


class ScaleError(MetagxError):
    """Normalization statistics cannot be fit or applied."""


class SplitError(MetagxError):
    """A cross-validation split cannot be constructed as requested."""


class TrainingError(MetagxError):
    """Training diverged or was driven with invalid settings."""


class MetricError(MetagxError):
    """A metric is undefined for the given score/label collection."""


class CheckpointError(MetagxError):
    """A checkpoint file is missing, malformed, or from an unknown format."""


class ConfigError(MetagxError):
    """A run configuration file or flag set is invalid."""
