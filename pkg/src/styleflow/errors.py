"""Exception types raised across the pipeline."""


class StyleFlowError(Exception):
    """Base class for every error raised by this package."""


class ClipLengthError(StyleFlowError, ValueError):
    pass


class DimensionMismatchError(StyleFlowError, ValueError):
    pass


class FaceNotFoundError(StyleFlowError):
    def __init__(self, frame_index):
        super().__init__(f"no face found in frame {frame_index}")
        self.frame_index = frame_index


class EncoderFailure(StyleFlowError):
    def __init__(self, frame_index, cause):
        super().__init__(f"encoder failed on frame {frame_index}: {cause}")
        self.frame_index = frame_index


class CorruptCacheError(StyleFlowError):
    pass


class ShapeError(StyleFlowError, ValueError):
    pass


class TooShortError(StyleFlowError, ValueError):
    pass


class EmptySetError(StyleFlowError, ValueError):
    pass


class InsufficientDataError(StyleFlowError):
    pass


class NonFiniteLossError(StyleFlowError, FloatingPointError):
    pass


class MissingCheckpointError(StyleFlowError, FileNotFoundError):
    pass


class SingleClassError(StyleFlowError, ValueError):
    pass


class UnknownPerturbationError(StyleFlowError, ValueError):
    pass


class ConfigError(StyleFlowError, ValueError):
    """Raised by config parsing; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


class UnknownKeyError(ConfigError):
    pass


class TypeMismatchError(ConfigError):
    pass


class RangeError(ConfigError):
    pass
