"""Exception types raised across the toolkit."""


class LidarPipeError(Exception):
    """Base class for all lidarpipe errors."""


class MalformedCloud(LidarPipeError):
    """Raw point-cloud buffer is not a whole number of 16-byte records."""


class NonFiniteValue(LidarPipeError):
    """A coordinate or reflectance value is NaN or infinite."""


class ReflectanceOutOfRange(LidarPipeError):
    """Reflectance outside [0, 1]; sensor data is rejected, never clamped."""


class MalformedLabel(LidarPipeError):
    """A label/detection line cannot be parsed.

    Carries the 1-based line number in ``line_no``.
    """

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingCalibEntry(LidarPipeError):
    """A required named row is absent from a calibration file."""

    def __init__(self, name):
        super().__init__(f"missing calibration entry {name!r}")
        self.name = name


class MalformedCalib(LidarPipeError):
    """A calibration row has the wrong value count or invalid content."""


class NotAPhysicalBox(LidarPipeError):
    """Geometry was requested for a DontCare annotation."""


class BadBox(LidarPipeError):
    """Box has non-positive dimensions, non-finite center, or unknown frame."""


class BadConfig(LidarPipeError):
    """Encoder/raster configuration violates its invariants."""


class BadWeights(LidarPipeError):
    """VFE weights are inconsistent (odd output width, shape mismatch, var<0)."""


class CoordOutOfGrid(LidarPipeError):
    """A pillar/voxel coordinate lies outside the configured grid."""


class OutOfRangeAngle(LidarPipeError):
    """sin-mode angle residual outside [-1, 1] cannot be decoded."""


class FrameSetMismatch(LidarPipeError):
    """Detection and ground-truth directories cover different frame ids."""
