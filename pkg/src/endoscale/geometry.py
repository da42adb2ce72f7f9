"""Pinhole camera model and SE(3) rigid transforms.

Conventions (fixed for the whole package):
  - right-handed camera frame, +z forward, +u right, +v down
  - pixel coordinates are continuous, pixel centers at integer (u, v)
  - poses are stored as unit quaternion (w, x, y, z) + translation
  - twist vectors are ordered rotation-first: xi = (wx, wy, wz, vx, vy, vz)
  - metric translations are in millimetres
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import LogNearPi, NonPositiveDepth, PointBehindCamera

Z_EPS = 1e-9


class PixelCoord(NamedTuple):
    u: float
    v: float


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, u, v) -> bool:
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1

    def halved(self) -> "Intrinsics":
        # One pyramid level down: pixel centers of the 2x2 block average sit
        # at original coordinate 2*u' + 0.5, hence the -0.5 shift.
        return Intrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=(self.cx - 0.5) / 2.0,
            cy=(self.cy - 0.5) / 2.0,
            width=self.width // 2,
            height=self.height // 2,
        )


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    q = q / n
    # canonical sign keeps serialized trajectories reproducible
    if q[0] < 0.0:
        q = -q
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _rot_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return _quat_normalize(q)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: x' = R(q) @ x + t.

    q is a unit quaternion (w, x, y, z), t a 3-vector.  Both arrays are
    marked read-only after construction; treat poses as values.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(np.asarray(self.q, dtype=float))
        t = np.array(self.t, dtype=float)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "PoseSE3":
        return cls(q=_rot_to_quat(np.asarray(R, dtype=float)), t=np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    def rotation(self) -> np.ndarray:
        return _quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def apply(self, x) -> np.ndarray:
        """Transform one 3-vector or an (N, 3) array of points."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation().T + self.t

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        return 2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0]))

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self.t))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """a then-applied-after b: (a*b)(x) = a(b(x))."""
    return PoseSE3(q=_quat_mul(a.q, b.q), t=a.rotation() @ b.t + a.t)


def inverse(a: PoseSE3) -> PoseSE3:
    q_inv = np.array([a.q[0], -a.q[1], -a.q[2], -a.q[3]])
    return PoseSE3(q=q_inv, t=-(_quat_to_rot(q_inv) @ a.t))


def se3_exp(xi) -> PoseSE3:
    """Exponential map se(3) -> SE(3); xi = (omega, v), rotation first."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"twist must be a 6-vector, got shape {xi.shape}")
    omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    W2 = W @ W
    if theta < 1e-8:
        # series: a = sin(t)/t, b = (1-cos t)/t^2, c = (t-sin t)/t^3
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return PoseSE3.from_rt(R, V @ v)


def se3_log(t: PoseSE3) -> np.ndarray:
    """Logarithm map SE(3) -> se(3).  Defined for rotation angle < pi."""
    theta = t.rotation_angle()
    if theta > np.pi - 1e-6:
        raise LogNearPi(f"rotation angle {theta:.9f} within 1e-6 of pi")
    qw = abs(t.q[0])
    axis_part = t.q[1:] * (1.0 if t.q[0] >= 0 else -1.0)
    sin_half = np.linalg.norm(axis_part)
    if sin_half < 1e-12:
        omega = 2.0 * axis_part  # first-order: q ~ (1, omega/2)
    else:
        omega = axis_part * (theta / sin_half)
    W = _skew(omega)
    W2 = W @ W
    if theta < 1e-8:
        d = 1.0 / 12.0 + theta**2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        d = (1.0 - a / (2.0 * b)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + d * W2
    return np.concatenate([omega, V_inv @ t.t])


# --- pinhole projection ---

def backproject(p, d: float, k: Intrinsics) -> Point3:
    """Lift pixel p at depth d to a camera-frame 3D point."""
    if d <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    u, v = p
    return Point3((u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d)


def project(x, k: Intrinsics) -> PixelCoord:
    """Project a camera-frame point; may land outside image bounds."""
    px, py, pz = x
    if pz <= Z_EPS:
        raise PointBehindCamera(f"z={pz} not in front of camera")
    return PixelCoord(k.fx * px / pz + k.cx, k.fy * py / pz + k.cy)


def warp_pixel(p, d: float, t: PoseSE3, k: Intrinsics):
    """Reproject pixel p with depth d through rigid transform t.

    Returns (PixelCoord, valid).  Valid is False when the transformed point
    falls behind the camera or projects outside image bounds; the returned
    coordinate is still the raw projection when z was usable.
    """
    if d <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    x = t.apply(np.array(backproject(p, d, k)))
    if x[2] <= Z_EPS:
        return PixelCoord(np.nan, np.nan), False
    q = PixelCoord(k.fx * x[0] / x[2] + k.cx, k.fy * x[1] / x[2] + k.cy)
    return q, k.contains(q.u, q.v)


# --- vectorized counterparts (used by imaging / odometry / fusion) ---

def backproject_pixels(u: np.ndarray, v: np.ndarray, d: np.ndarray, k: Intrinsics) -> np.ndarray:
    """(N,) pixel coords + depths -> (N, 3) camera-frame points."""
    return np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=-1)


def project_points(pts: np.ndarray, k: Intrinsics):
    """(N, 3) camera-frame points -> (u, v, in_front) arrays.

    u/v are NaN where z <= Z_EPS; bounds are NOT checked here.
    """
    z = pts[..., 2]
    in_front = z > Z_EPS
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, k.fx * pts[..., 0] / safe_z + k.cx, np.nan)
    v = np.where(in_front, k.fy * pts[..., 1] / safe_z + k.cy, np.nan)
    return u, v, in_front
