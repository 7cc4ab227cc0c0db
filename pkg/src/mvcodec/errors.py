"""Exception types shared across the codec."""


class MVCodecError(Exception):
    """Base class for all codec errors."""


class ConfigError(MVCodecError):
    """Invalid or inconsistent configuration."""


class OracleUnavailableError(ConfigError):
    """A requested supervision oracle cannot be constructed (e.g. missing
    pretrained weights). Never silently degraded to a zero signal."""


class EncodingDivergedError(MVCodecError):
    """Training produced a non-finite loss."""


class BitstreamError(MVCodecError):
    """Base class for malformed-bitstream failures."""


class BadMagicError(BitstreamError):
    """Stream does not start with the expected magic bytes."""


class VersionError(BitstreamError):
    """Stream version is not supported by this reader."""


class ChecksumError(BitstreamError):
    """Trailing CRC32 does not match the stream contents."""


class TruncatedStreamError(BitstreamError):
    """Stream ended before a complete record could be read."""
