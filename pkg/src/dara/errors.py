"""Exception types shared across the engine."""


class DaraError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(DaraError):
    """Operands have incompatible dimensions; message names the offending shapes."""


class NonScalarLoss(DaraError):
    """backward() was asked to differentiate a node that is not 1x1."""


class NotPositiveDefinite(DaraError):
    """Cholesky factorization hit a non-positive pivot."""


class ZeroNormFeature(DaraError):
    """A feature vector with norm below 1e-12 cannot be cosine-compared."""


class ChannelMismatch(DaraError):
    """Channel counts of features and statistics disagree."""


class IoFailure(DaraError):
    """A file could not be read or written."""


class BadMagic(IoFailure):
    """File does not start with the expected magic bytes."""


class HeaderMismatch(IoFailure):
    """Declared sizes in a file header disagree with the payload."""


class LabelOutOfRange(DaraError):
    """An item label is not smaller than the declared class count."""


class InsufficientItems(DaraError):
    """A class does not hold enough items for the requested episode."""


class DivergenceDetected(DaraError):
    """A training loss became non-finite."""


class ConfigError(DaraError):
    """A config file or flag is invalid; message names the offending key."""
