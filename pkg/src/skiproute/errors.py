"""Exception hierarchy. CLI exit codes map onto these classes."""


class SkipRouteError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SkipRouteError):
    """Tensor shapes incompatible with the requested operation."""


class MaskError(SkipRouteError):
    """Degenerate mask: an all-masked attention row or an all-pad sequence."""


class VocabularyError(SkipRouteError):
    """Token id outside the model vocabulary."""


class CacheConsistencyError(SkipRouteError):
    """KV cache state disagrees with the requested positions or skip set."""


class EnumerationLimitError(SkipRouteError):
    """Layer count too large for exhaustive subsequence enumeration."""


class ConfigError(SkipRouteError):
    """Invalid configuration value or unreadable config file."""


class DatasetError(SkipRouteError):
    """Empty or malformed dataset."""


class NumericalError(SkipRouteError):
    """Non-finite value encountered during training."""


class BundleError(SkipRouteError):
    """Base class for binary-container format errors."""


class BadMagicError(BundleError):
    """File does not start with the expected container magic."""


class VersionError(BundleError):
    """Container version not supported by this build."""


class TruncatedFileError(BundleError):
    """File ends before the declared payload does."""


class BundleShapeError(BundleError):
    """Stored tensor shape disagrees with the header configuration."""
