"""Exception hierarchy shared by every splatloc module."""


class SplatlocError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(SplatlocError, ValueError):
    pass


class BehindCameraError(SplatlocError, ValueError):
    pass


class PlyFormatError(SplatlocError):
    pass


class PlyDataError(SplatlocError):
    pass


class LowCoverageError(SplatlocError):
    """Rendered alpha at the requested pixel is too low to trust its depth."""


class DegenerateMaskError(SplatlocError):
    pass


class WeakMatchError(SplatlocError):
    pass


class AnchorInvalidError(SplatlocError):
    pass


class SearchFailedError(SplatlocError):
    pass


class InitializationFailedError(SplatlocError):
    pass


class NonFiniteLossError(SplatlocError):
    pass


class ConfigError(SplatlocError):
    pass
