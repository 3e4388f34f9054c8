"""Exception hierarchy shared across the package."""


class DartError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DartError):
    """Tensor extents are inconsistent with an operation's contract."""


class ConfigError(DartError):
    """A hyperparameter or configuration value is invalid."""


class UnknownKeyError(ConfigError):
    """A config file names a key that does not exist (usage error)."""


class NumericsError(DartError):
    """A computation produced NaN/Inf or hit an empty numeric domain."""


class PnmError(DartError):
    """Base class for PNM image parsing failures."""


class PnmMagicError(PnmError):
    """The file does not start with a supported PNM magic number."""


class PnmMaxvalError(PnmError):
    """The PNM maxval is not 255."""


class PnmTruncatedError(PnmError):
    """The PNM payload ends before the declared sample count."""


class CheckpointError(DartError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape does not match the model's expectation."""
