"""Exception hierarchy shared across the pipeline."""


class OwrfError(Exception):
    """Base class for all owrf errors."""


class ConfigurationError(OwrfError):
    """Invalid configuration value, profile, or call argument."""


class TooShortRecordError(ConfigurationError):
    """Record shorter than the requested analysis window."""


class UnknownWindowError(ConfigurationError):
    """Window name not in the supported set."""


class DimensionMismatchError(ConfigurationError):
    """Array shape does not match the configured dimensions."""


class UnknownLabelError(ConfigurationError):
    """Label outside the known class set."""


class DataFormatError(OwrfError):
    """Malformed on-disk data: truncated file, bad magic, non-finite values."""


class MissingArtifactError(OwrfError):
    """A prerequisite artifact (checkpoint, manifest, dataset) does not exist."""


class BudgetExceededError(OwrfError):
    """Compute budget (optimizer step cap) would be exceeded."""


class NumericalError(OwrfError):
    """Non-finite loss or a failed matrix factorization."""


class UnderSampledClassError(NumericalError):
    """Too few samples to fit or calibrate class statistics."""
