"""Exception types shared across the package."""


class EPNetError(Exception):
    """Base class for all package errors."""


class DimensionError(EPNetError, ValueError):
    """Tensor or image shapes do not satisfy an operation's contract."""


class DomainError(EPNetError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class ConfigError(EPNetError, ValueError):
    """Invalid configuration (channel schedule, groups, ranges, unknown keys)."""


class CheckpointError(EPNetError):
    """Checkpoint file is truncated, malformed or incompatible with the config."""


class DatasetError(EPNetError):
    """Paired-image directory is inconsistent.

    ``orphans`` lists the files that have no partner.
    """

    def __init__(self, message, orphans=()):
        super().__init__(message)
        self.orphans = list(orphans)


class TrainingError(EPNetError):
    """Training aborted, e.g. on a non-finite loss."""
