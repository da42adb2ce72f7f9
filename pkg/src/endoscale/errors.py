"""Exception types shared across the pipeline.

Everything derives from EndoscaleError so callers can catch the whole
family at stage boundaries (the CLI does exactly that).
"""


class EndoscaleError(Exception):
    pass


# --- geometry ---

class NonPositiveDepth(EndoscaleError):
    pass


class PointBehindCamera(EndoscaleError):
    pass


class LogNearPi(EndoscaleError):
    """se3_log is ill-conditioned for rotation angles at pi."""
    pass


# --- rasters / losses ---

class ShapeMismatch(EndoscaleError):
    pass


class EmptyMask(EndoscaleError):
    pass


class UnitMismatch(EndoscaleError):
    pass


# --- odometry ---

class InsufficientOverlap(EndoscaleError):
    """Too few valid residuals at the finest pyramid level."""
    pass


class Diverged(EndoscaleError):
    """Robustified cost kept increasing despite damping."""
    pass


# --- kinematics ---

class ParseError(EndoscaleError):
    def __init__(self, line_no, content, reason=""):
        self.line_no = line_no
        self.content = content
        super().__init__(f"line {line_no}: {reason or 'cannot parse'}: {content!r}")


class NonMonotonicTimestamps(EndoscaleError):
    pass


class NonUnitQuaternion(EndoscaleError):
    def __init__(self, line_no, norm):
        self.line_no = line_no
        self.norm = norm
        super().__init__(f"line {line_no}: quaternion norm {norm:.6f} too far from 1")


class IndexOutOfRange(EndoscaleError, LookupError):
    pass


class NoMatchWithinTolerance(EndoscaleError):
    pass


# --- ddso / distill ---

class InsufficientSamples(EndoscaleError):
    pass


class MissingScale(EndoscaleError):
    pass


# --- fusion ---

class RegistrationFailed(EndoscaleError):
    pass


class EmptyMap(EndoscaleError):
    pass


# --- metrics ---

class LengthMismatch(EndoscaleError):
    pass


class IcpDiverged(EndoscaleError):
    pass


# --- synthdata ---

class NoSurfaceVisible(EndoscaleError):
    def __init__(self, frame_index):
        self.frame_index = frame_index
        super().__init__(f"no surface visible in frame {frame_index}")
