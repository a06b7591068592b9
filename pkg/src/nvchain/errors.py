"""Exception types raised across the package."""


class NVChainError(Exception):
    """Base class for every error raised by nvchain."""


class InputError(NVChainError, ValueError):
    """Invalid argument: wrong shape, out-of-range value, non-finite entry."""


class ConfigError(NVChainError, ValueError):
    """Invalid training or run configuration."""


class FormatError(NVChainError):
    """A file could not be decoded."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    def __init__(self, what="file"):
        super().__init__(f"unexpected end of file while reading {what}")


class ShapeError(FormatError):
    pass


class ManifestError(FormatError):
    """Manifest CSV problem; the message names the row and column."""


class WavError(FormatError):
    pass


class UnsupportedWavError(WavError):
    pass
