"""Exception types shared across the toolkit."""


class SplatStegoError(Exception):
    """Base class for all errors raised by this package."""


class MalformedHeaderError(SplatStegoError):
    """PLY header does not declare the vanilla 62-property binary schema."""


class TruncatedPayloadError(SplatStegoError):
    """PLY payload byte count does not match the declared vertex count."""


class NonFiniteValueError(SplatStegoError):
    """NaN/Inf encountered in asset data (or a degenerate zero quaternion)."""


class OutOfRangeError(SplatStegoError):
    """Coefficient outside the representable quantization range."""


class ShiftOverflowError(SplatStegoError):
    """Bit-plane shift meets or exceeds the integer width."""


class ShapeMismatchError(SplatStegoError):
    """Array shapes of the operands do not agree."""


class IndexOutOfRangeError(SplatStegoError):
    """Index outside the valid range for the container."""


class KeyVersionError(SplatStegoError):
    """Key file has an unsupported magic/version."""


class ChecksumError(SplatStegoError):
    """Key file is truncated or its payload CRC does not validate."""


class DivergenceError(SplatStegoError):
    """Training loss became non-finite."""


class EmptyViewsError(SplatStegoError):
    """A training/evaluation view list is empty."""


class InvalidRatioError(SplatStegoError):
    """Pruning ratio outside [0, 1)."""


class ZeroBaselineError(SplatStegoError):
    """Relative decay is undefined for a zero baseline metric."""


class ImageTooSmallError(SplatStegoError):
    """Image smaller than the SSIM window."""


class StaleProductError(SplatStegoError):
    """Render inputs changed between the forward and backward pass."""


class ConfigError(SplatStegoError):
    """Invalid or unknown configuration key/value."""
