"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` and ``DataFormatError``
are data/config problems (exit 2), ``TrainingError`` is a runtime failure
(exit 3).
"""


class AVGroundError(Exception):
    pass


class ShapeError(AVGroundError, ValueError):
    pass


class ConfigError(AVGroundError, ValueError):
    """A configuration value violates its contract; ``field`` names it."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataFormatError(AVGroundError, ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class KindMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class SourceMismatchError(DataFormatError):
    """Feature archives from different checkpoints were combined."""


class TrainingError(AVGroundError, RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass
