"""Depth-driven sliding optimization: metric scale from kinematics + odometry.

Per consecutive frame pair, the scale sample is the ratio of the kinematic
translation norm (mm) to the image-space translation norm (relative depth
units).  Samples are noisy, so a sliding-window logarithmic moving average
(the geometric mean, the right average under a multiplicative error model)
produces the filtered per-frame scale used to lift relative depth to
millimetres.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import kinematics as kin_mod
from . import odometry as odo_mod
from .errors import EndoscaleError, UnitMismatch
from .geometry import PoseSE3, compose, inverse
from .imaging import DepthMap, UNITS_MM, UNITS_RELATIVE
from .kinematics import KinematicsTrajectory
from .odometry import Frame, OdometryConfig

DEFAULT_WINDOW_N = 10
DEFAULT_MIN_IMG_NORM = 1e-3  # relative depth units
DEFAULT_MIN_KIN_NORM = 1e-3  # mm


@dataclass(frozen=True)
class ScaleSample:
    """One per-pair scale estimate r = |kinematic t| / |image t|."""

    frame_index: int
    r: float
    kin_norm: float
    img_norm: float
    valid: bool


@dataclass(frozen=True)
class ScaleSeries:
    """Raw samples plus (optionally) the window-filtered values.

    filtered[i] is NaN where no reliable window estimate exists; window_n
    is the number of images N in the sliding window, i.e. N-1 samples.
    """

    samples: List[ScaleSample]
    window_n: int = DEFAULT_WINDOW_N
    filtered: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.window_n < 2:
            raise ValueError("window_n must be >= 2")
        if self.filtered is not None:
            f = np.array(self.filtered, dtype=float)
            if f.shape != (len(self.samples),):
                raise ValueError("filtered length must match samples")
            f.flags.writeable = False
            object.__setattr__(self, "filtered", f)

    def raw_values(self) -> np.ndarray:
        return np.array([s.r if s.valid else np.nan for s in self.samples])

    def filtered_valid(self) -> np.ndarray:
        if self.filtered is None:
            return np.zeros(len(self.samples), dtype=bool)
        return np.isfinite(self.filtered)


def scale_sample(
    kin_rel: PoseSE3,
    img_rel: PoseSE3,
    min_img_norm: float = DEFAULT_MIN_IMG_NORM,
    min_kin_norm: float = DEFAULT_MIN_KIN_NORM,
    frame_index: int = -1,
) -> ScaleSample:
    """One scale estimate from a kinematic / image-space relative pose pair.

    Marked invalid (DegenerateMotion) when either translation norm is below
    its threshold; the ratio is meaningless on near-stationary pairs.
    """
    if min_img_norm <= 0 or min_kin_norm <= 0:
        raise ValueError("degenerate-motion thresholds must be positive")
    kin_norm = kin_rel.translation_norm()
    img_norm = img_rel.translation_norm()
    if img_norm < min_img_norm or kin_norm < min_kin_norm:
        return ScaleSample(frame_index=frame_index, r=float("nan"),
                           kin_norm=kin_norm, img_norm=img_norm, valid=False)
    return ScaleSample(frame_index=frame_index, r=kin_norm / img_norm,
                       kin_norm=kin_norm, img_norm=img_norm, valid=True)


def lma_filter(series: ScaleSeries, n: Optional[int] = None) -> ScaleSeries:
    """Sliding-window geometric mean over the most recent valid samples.

    At index i the window gathers the n-1 most recent valid samples at
    indices <= i, skipping invalid ones and extending backward as far as
    the series start.  The estimate is marked invalid where fewer than
    ceil((n-1)/2) valid samples are available (InsufficientSamples).

    The geometric mean is computed in log10 space anchored at the newest
    window value, which makes a constant window an exact fixed point; the
    result is clipped into [min, max] of the window so the bounded-by-
    extremes property holds under rounding.
    """
    if n is None:
        n = series.window_n
    if n < 2:
        raise ValueError("window must span at least 2 images")
    m = len(series.samples)
    per_window = n - 1
    min_valid = math.ceil(per_window / 2)
    filtered = np.full(m, np.nan)
    valid_positions: List[int] = []
    for i, s in enumerate(series.samples):
        if s.valid:
            valid_positions.append(i)
        count = min(per_window, len(valid_positions))
        if count < min_valid:
            continue
        window = [series.samples[j].r for j in valid_positions[-count:]]
        anchor = window[-1]
        logs = np.log10(np.asarray(window) / anchor)
        value = anchor * 10.0 ** float(np.mean(logs))
        filtered[i] = min(max(value, min(window)), max(window))
    return ScaleSeries(samples=list(series.samples), window_n=n, filtered=filtered)


def ensemble_depth(d: DepthMap, r_filtered: float) -> DepthMap:
    """Scale a relative depth map to millimetres by the filtered scale."""
    if d.units != UNITS_RELATIVE:
        raise UnitMismatch(f"expected relative depth, got units={d.units!r}")
    if not (r_filtered > 0 and np.isfinite(r_filtered)):
        raise ValueError(f"scale must be positive and finite, got {r_filtered}")
    return DepthMap(data=d.data * r_filtered, units=UNITS_MM, valid=d.valid)


@dataclass(frozen=True)
class DdsoConfig:
    window_n: int = DEFAULT_WINDOW_N
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    min_img_norm: float = DEFAULT_MIN_IMG_NORM
    min_kin_norm: float = DEFAULT_MIN_KIN_NORM
    max_dt: float = kin_mod.DEFAULT_MAX_DT
    n_jobs: int = 1

    def __post_init__(self):
        if self.window_n < 2:
            raise ValueError("window_n must be >= 2")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")


@dataclass(frozen=True)
class PairDiagnostics:
    frame_index: int
    status: str  # "ok" | "unmatched" | error class name
    detail: str = ""


@dataclass(frozen=True)
class DdsoResult:
    series: ScaleSeries
    poses: List[PoseSE3]          # camera-to-world (world = first frame), relative units
    rel_poses: List[Optional[PoseSE3]]  # per-pair T_i^{i+1}; None where estimation failed
    pair_diagnostics: List[PairDiagnostics]


def run_ddso(frames: Sequence[Frame], kin: KinematicsTrajectory,
             cfg: Optional[DdsoConfig] = None) -> DdsoResult:
    """Batch scale recovery over a frame sequence.

    For each consecutive pair: direct odometry gives the image-space
    relative pose, timestamp-aligned kinematics the metric one; their
    translation-norm ratio is the raw scale sample.  The filtered series
    comes from lma_filter.  Pose estimation failures and unmatched or
    stationary pairs become invalid samples; everything downstream skips
    them.  Deterministic for fixed inputs regardless of n_jobs.
    """
    if cfg is None:
        cfg = DdsoConfig()
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    align = kin_mod.align_by_timestamp(kin, [f.timestamp for f in frames], max_dt=cfg.max_dt)

    def solve_pair(i):
        try:
            T, diag = odo_mod.estimate_pose(frames[i], frames[i + 1], cfg=cfg.odometry)
            return T, None
        except EndoscaleError as exc:
            return None, exc

    n_pairs = len(frames) - 1
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            pair_results = list(pool.map(solve_pair, range(n_pairs)))
    else:
        pair_results = [solve_pair(i) for i in range(n_pairs)]

    samples: List[ScaleSample] = []
    rel_poses: List[Optional[PoseSE3]] = []
    diags: List[PairDiagnostics] = []
    poses: List[PoseSE3] = [PoseSE3.identity()]
    for i in range(n_pairs):
        T, err = pair_results[i]
        rel_poses.append(T)
        if T is not None:
            # T maps frame i coords into frame i+1; camera-to-world chains
            # by its inverse
            poses.append(compose(poses[-1], inverse(T)))
        else:
            poses.append(poses[-1])

        ki, kj = align.indices[i], align.indices[i + 1]
        if err is not None:
            diags.append(PairDiagnostics(i, type(err).__name__, str(err)))
            samples.append(ScaleSample(i, float("nan"), 0.0, 0.0, False))
            continue
        if ki is None or kj is None:
            diags.append(PairDiagnostics(i, "unmatched", "no kinematics within max_dt"))
            samples.append(ScaleSample(i, float("nan"), 0.0, 0.0, False))
            continue
        kin_rel = kin_mod.relative_pose(kin, ki, kj)
        samples.append(
            scale_sample(kin_rel, T, min_img_norm=cfg.min_img_norm,
                         min_kin_norm=cfg.min_kin_norm, frame_index=i)
        )
        diags.append(PairDiagnostics(i, "ok"))

    series = lma_filter(ScaleSeries(samples=samples, window_n=cfg.window_n))
    return DdsoResult(series=series, poses=poses, rel_poses=rel_poses, pair_diagnostics=diags)


def per_frame_scale(series: ScaleSeries, n_frames: int, backfill: bool = True) -> np.ndarray:
    """Filtered scale for each frame (sample i covers the pair i -> i+1).

    Frame k nominally uses the filtered value of the pair ending at k;
    gaps are forward-filled from the last valid estimate, and frames before
    the first valid estimate are backfilled from it when backfill is on.
    Entries with no available scale are NaN.
    """
    if series.filtered is None:
        raise ValueError("series has no filtered values; run lma_filter first")
    m = len(series.samples)
    out = np.full(n_frames, np.nan)
    last = np.nan
    for k in range(n_frames):
        idx = min(max(k - 1, 0), m - 1) if m else -1
        if idx >= 0 and np.isfinite(series.filtered[idx]):
            last = series.filtered[idx]
        out[k] = last
    if backfill:
        finite = np.isfinite(out)
        if finite.any():
            first = out[finite][0]
            out[: int(np.argmax(finite))] = first
    return out
