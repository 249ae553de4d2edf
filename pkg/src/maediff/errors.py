"""Exception hierarchy shared by all modules."""


class MAEDiffError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MAEDiffError, ValueError):
    """A configuration value violates a documented invariant."""


class StepError(MAEDiffError, ValueError):
    """A diffusion timestep is outside ``[1, T]``."""


class NumericError(MAEDiffError, RuntimeError):
    """A loss or model output became non-finite."""


class MetricError(MAEDiffError, ValueError):
    """A metric is undefined for the given inputs (e.g. no positives)."""


class TensorFormatError(MAEDiffError, ValueError):
    """Base class for ``.maed`` tensor file decoding errors."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass
