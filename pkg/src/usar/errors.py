"""Exception types shared across the package."""


class UsarError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class EmptyRegion(UsarError):
    """No pixels matched the requested class selector."""


class NonPositiveDimension(UsarError):
    """A physical dimension that must be positive was zero or negative."""


class BadBox(UsarError):
    """Supplied corners do not form a usable rectangle."""


# metrics
class ShapeMismatch(UsarError):
    """Prediction and ground truth grids have different dimensions."""


class EmptyDataset(UsarError):
    """An evaluation was requested over zero samples."""


# protocol
class ProtocolError(UsarError):
    """Base class for wire-format violations."""


class BadMagic(ProtocolError):
    """Datagram does not start with the expected magic bytes."""


class BadVersion(ProtocolError):
    """Unsupported protocol version."""


class Truncated(ProtocolError):
    """Datagram is shorter than its header or declared payload."""


class BoundsViolation(ProtocolError):
    """Header fields are internally inconsistent."""


class Oversize(ProtocolError):
    """Frame too large to fragment within the 16-bit fragment counter."""


class BadChannel(ProtocolError):
    """Unknown channel, or payload does not match the channel contract."""


# providers
class MissingDirectory(UsarError):
    """Replay directory does not exist."""


class MalformedFile(UsarError):
    """A replay file could not be parsed; message carries the filename."""


class DimensionMismatch(UsarError):
    """An image and its mask have different dimensions."""


class ProviderTimeout(UsarError):
    """Segmentation provider produced no result within the deadline."""


class ProviderCrashed(UsarError):
    """Connection to an external segmentation provider was lost."""


# server
class IllegalTransition(UsarError):
    """Command is not legal in the current session phase."""


class NoFrameAvailable(UsarError):
    """Capture requested before any aligned frame arrived."""


class MeasurementFailed(UsarError):
    """Geometry could not produce a measurement for the captured frame."""
