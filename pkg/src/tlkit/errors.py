"""Exception types raised across the toolkit."""


class TLKitError(Exception):
    pass


class ConfigError(TLKitError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(TLKitError, ValueError):
    pass


class InputError(TLKitError, ValueError):
    pass


class LabelError(TLKitError, ValueError):
    pass


class UsageError(TLKitError, ValueError):
    pass


class AnnotationError(TLKitError, ValueError):
    pass


class DegenerateCellError(TLKitError, ValueError):
    pass


class CropError(TLKitError, ValueError):
    pass


class GenerationError(TLKitError, RuntimeError):
    pass


class TrainingError(TLKitError, RuntimeError):
    pass


class FormatError(TLKitError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
