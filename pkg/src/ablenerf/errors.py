"""Exception hierarchy shared by all ablenerf modules."""


class AbleNerfError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AbleNerfError):
    """Operands have incompatible shapes or extents."""


class ContractError(AbleNerfError):
    """A function precondition was violated by the caller."""


class InvariantError(AbleNerfError):
    """An internal invariant that should be impossible to break was broken."""


class ConfigError(AbleNerfError):
    """Invalid configuration value or combination."""


class SceneFormatError(AbleNerfError):
    """A dataset or scene description file could not be parsed."""


class CheckpointError(AbleNerfError):
    """A checkpoint file is missing, truncated, or malformed."""


class TrainingError(AbleNerfError):
    """Training aborted, e.g. on a non-finite gradient."""
