"""Exception hierarchy shared by every module."""


class ScorepropError(Exception):
    """Base class for all package errors."""


class ShapeError(ScorepropError, ValueError):
    """Tensor or layer geometry does not compose."""


class ConfigError(ScorepropError, ValueError):
    """Invalid hyperparameter or option combination."""


class FormatError(ScorepropError, IOError):
    """A file on disk does not follow its binary layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedBlobError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class UnknownLayerError(FormatError):
    def __init__(self, kind):
        super().__init__(f"unknown layer kind {kind!r}")
        self.kind = kind


class ImageFormatError(FormatError):
    pass


class BlankImageError(ScorepropError, ValueError):
    def __init__(self, msg="blank image: no pixel exceeds the background threshold"):
        super().__init__(msg)
