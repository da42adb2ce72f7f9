"""Robot-kinematics trajectories: loading, relative poses, time alignment.

Trajectories are TUM-format text files, one entry per line:

    timestamp tx ty tz qx qy qz qw

with timestamps in seconds, translations in millimetres, and a unit
quaternion.  Lines starting with '#' are comments; files written by this
module carry a "# units: mm" header.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    NonMonotonicTimestamps,
    NonUnitQuaternion,
    ParseError,
)
from .geometry import PoseSE3, compose, inverse

QUAT_NORM_TOL = 1e-3
DEFAULT_MAX_DT = 0.05  # seconds


class KinematicsEntry(NamedTuple):
    timestamp: float
    pose: PoseSE3
    frame_index: Optional[int] = None


@dataclass(frozen=True)
class KinematicsTrajectory:
    """Time-ordered poses under one fixed base frame."""

    entries: List[KinematicsEntry]

    def __post_init__(self):
        ts = [e.timestamp for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def timestamps(self) -> np.ndarray:
        return np.array([e.timestamp for e in self.entries])


def load_trajectory(path, fmt: str = "tum") -> KinematicsTrajectory:
    """Parse a TUM-format trajectory file.

    Quaternions within 1e-3 of unit norm are renormalized; anything further
    off is rejected as NonUnitQuaternion.
    """
    if fmt != "tum":
        raise ValueError(f"unsupported trajectory format {fmt!r}")
    entries = []
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(line_no, line, f"expected 8 fields, got {len(fields)}")
            try:
                vals = [float(x) for x in fields]
            except ValueError:
                raise ParseError(line_no, line, "non-numeric field")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            q = np.array([qw, qx, qy, qz])
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) > QUAT_NORM_TOL:
                raise NonUnitQuaternion(line_no, norm)
            pose = PoseSE3(q=q, t=np.array([tx, ty, tz]))
            entries.append(KinematicsEntry(timestamp=ts, pose=pose, frame_index=len(entries)))
    return KinematicsTrajectory(entries=entries)


def save_trajectory(path, traj_or_poses, timestamps: Optional[Sequence[float]] = None,
                    units: str = "mm"):
    """Write TUM format; accepts a KinematicsTrajectory or poses+timestamps."""
    if isinstance(traj_or_poses, KinematicsTrajectory):
        rows = [(e.timestamp, e.pose) for e in traj_or_poses.entries]
    else:
        if timestamps is None:
            timestamps = list(range(len(traj_or_poses)))
        rows = list(zip(timestamps, traj_or_poses))
    with open(path, "w") as fh:
        fh.write(f"# units: {units}\n")
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in rows:
            qw, qx, qy, qz = pose.q
            tx, ty, tz = pose.t
            fh.write(
                f"{ts!r} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}\n"
            )


def relative_pose(traj: KinematicsTrajectory, i: int, j: int) -> PoseSE3:
    """Motion from entry i to entry j, expressed in frame i."""
    n = len(traj)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexOutOfRange(f"indices ({i}, {j}) out of range for length {n}")
    return compose(inverse(traj.entries[i].pose), traj.entries[j].pose)


class TimestampAlignment(NamedTuple):
    indices: List[Optional[int]]  # per image: matched kinematics index or None
    unmatched: List[int]          # image indices with no match within tolerance


def align_by_timestamp(traj: KinematicsTrajectory, image_timestamps: Sequence[float],
                       max_dt: float = DEFAULT_MAX_DT) -> TimestampAlignment:
    """Nearest-neighbor association of image times to kinematics entries."""
    if len(traj) == 0 or len(image_timestamps) == 0:
        raise ValueError("both the trajectory and the image timestamps must be non-empty")
    kin_ts = traj.timestamps()
    indices: List[Optional[int]] = []
    unmatched: List[int] = []
    for img_i, ts in enumerate(image_timestamps):
        pos = int(np.searchsorted(kin_ts, ts))
        cands = [c for c in (pos - 1, pos) if 0 <= c < len(kin_ts)]
        best = min(cands, key=lambda c: (abs(kin_ts[c] - ts), c))
        if abs(kin_ts[best] - ts) <= max_dt:
            indices.append(best)
        else:
            indices.append(None)
            unmatched.append(img_i)
    return TimestampAlignment(indices=indices, unmatched=unmatched)
