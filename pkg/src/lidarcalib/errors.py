"""Exception types shared across the calibration pipeline."""


class LidarCalibError(Exception):
    """Base class for all package errors."""


class AngleNearPi(LidarCalibError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


class ParseError(LidarCalibError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedField(LidarCalibError):
    """PCD file uses fields outside the supported subset."""


class NonMonotonicStamps(LidarCalibError):
    """Trajectory stamps are not strictly increasing."""


class StampMismatch(LidarCalibError):
    """Frame stamp has no trajectory sample within the association tolerance."""


class InvalidParams(LidarCalibError):
    """Parameter combination violates a documented precondition."""


class DegenerateGeometry(LidarCalibError):
    """Too few independent point-to-plane constraints to optimize a window."""

    def __init__(self, message: str, window: int | None = None):
        self.window = window
        if window is not None:
            message = f"window {window}: {message}"
        super().__init__(message)


class Degenerate(LidarCalibError):
    """Point set cannot support a plane fit (too few or collinear points)."""


class Unobservable(LidarCalibError):
    """Plane geometry does not constrain all six pose degrees of freedom."""

    def __init__(self, message: str, frame_indices: list[int] | None = None):
        self.frame_indices = frame_indices or []
        if self.frame_indices:
            message = f"{message} (frames {self.frame_indices})"
        super().__init__(message)


class NoCorrespondences(LidarCalibError):
    """Every source frame failed plane association."""


class EmptyFrame(LidarCalibError):
    """A simulated scan produced no returns."""


class ConfigError(LidarCalibError):
    """Bad key or value in a run configuration."""
