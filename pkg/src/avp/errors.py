"""Exception types shared across the package."""


class AVPError(Exception):
    """Base class for every error raised by this package."""


# geometry
class BehindCamera(AVPError):
    pass


# trajio
class SchemaMismatch(AVPError):
    pass


class MalformedRecord(AVPError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicTime(MalformedRecord):
    pass


class BadRotation(AVPError):
    pass


class MissingField(AVPError):
    pass


class TruncatedFile(AVPError):
    pass


class ChecksumMismatch(AVPError):
    pass


# supervision
class OffImage(AVPError):
    pass


class NoKeyframes(AVPError):
    pass


# sim
class TooManyPieces(AVPError):
    pass


class InfeasibleTask(AVPError):
    pass


# learn
class ShapeMismatch(AVPError):
    pass


class LabelOutOfRange(AVPError):
    pass


# harness
class ConfigError(AVPError):
    pass


class CheckpointMismatch(AVPError):
    pass
