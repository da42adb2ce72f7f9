"""Evaluation metrics: depth error/accuracy, trajectory error, cloud RMSE.

Depth metrics follow the standard monocular-depth convention (abs rel,
sq rel, RMSE, log RMSE, delta accuracies at 1.25^k); trajectory metrics are
ATE (after rigid alignment without scale) plus relative translation /
rotation errors at a frame spacing; cloud RMSE registers two point clouds
with point-to-point ICP and reports the residual over matched pairs.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMask, IcpDiverged, LengthMismatch, ShapeMismatch, UnitMismatch
from .geometry import PoseSE3, compose, inverse
from .imaging import DepthMap

DEFAULT_CLAMP = (1e-3, 150.0)  # mm
DELTA_BASE = 1.25


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    n_frames: int = 1

    def as_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel, "sq_rel": self.sq_rel, "rmse": self.rmse,
            "rmse_log": self.rmse_log, "delta1": self.delta1,
            "delta2": self.delta2, "delta3": self.delta3,
            "n_pixels": self.n_pixels, "n_frames": self.n_frames,
        }


def depth_metrics(pred: DepthMap, gt: DepthMap, clamp=DEFAULT_CLAMP) -> DepthMetrics:
    """Errors of pred against gt over jointly valid pixels, pred clamped."""
    if pred.data.shape != gt.data.shape:
        raise ShapeMismatch(f"pred {pred.data.shape} vs gt {gt.data.shape}")
    if pred.units != gt.units:
        raise UnitMismatch(f"pred units {pred.units!r} vs gt {gt.units!r}")
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyMask("no jointly valid pixel")
    p = np.clip(pred.data[mask], clamp[0], clamp[1])
    g = gt.data[mask]
    diff = p - g
    thresh = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < DELTA_BASE)),
        delta2=float(np.mean(thresh < DELTA_BASE**2)),
        delta3=float(np.mean(thresh < DELTA_BASE**3)),
        n_pixels=int(mask.sum()),
    )


def aggregate_depth_metrics(per_frame: Sequence[DepthMetrics]) -> DepthMetrics:
    """Average of per-frame metrics (not pooled over pixels)."""
    if not per_frame:
        raise EmptyMask("no frames to aggregate")
    fields = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"]
    means = {f: float(np.mean([getattr(m, f) for m in per_frame])) for f in fields}
    return DepthMetrics(
        n_pixels=int(sum(m.n_pixels for m in per_frame)),
        n_frames=len(per_frame),
        **means,
    )


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse: float
    ate_mean: float
    ate_std: float
    rte_mean: float
    rte_std: float
    rre_mean: float
    rre_std: float
    ate_rmse_unaligned: float
    alignment: str  # "rigid" | "translation_only"

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse, "ate_mean": self.ate_mean,
            "ate_std": self.ate_std, "rte_mean": self.rte_mean,
            "rte_std": self.rte_std, "rre_mean": self.rre_mean,
            "rre_std": self.rre_std,
            "ate_rmse_unaligned": self.ate_rmse_unaligned,
            "alignment": self.alignment,
        }


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid transform (R, t) minimizing |R src + t - dst|^2.

    No scale.  Returns (R, t, degenerate); degenerate is True when the
    points do not constrain a rotation (rank < 2), in which case R = I and
    only the centroids are matched.
    """
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    H = cs.T @ cd
    U, S, Vt = np.linalg.svd(H)
    spread = S[0] if S[0] > 0 else 1.0
    if len(src) < 3 or S[1] / spread < 1e-9:
        return np.eye(3), mu_d - mu_s, True
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s, False


def trajectory_metrics(est: Sequence[PoseSE3], gt: Sequence[PoseSE3],
                       delta: int = 1) -> TrajectoryMetrics:
    """ATE after rigid alignment plus relative errors at spacing delta."""
    if len(est) != len(gt):
        raise LengthMismatch(f"est {len(est)} vs gt {len(gt)} poses")
    if len(est) < 2:
        raise ValueError("need at least 2 poses")
    if delta < 1 or delta >= len(est):
        raise ValueError(f"delta must be in [1, {len(est) - 1}]")
    p_est = np.array([p.t for p in est])
    p_gt = np.array([p.t for p in gt])
    R, t, degenerate = rigid_align(p_est, p_gt)
    aligned = p_est @ R.T + t
    err = np.linalg.norm(aligned - p_gt, axis=1)
    err_raw = np.linalg.norm(p_est - p_gt, axis=1)

    rte = []
    rre = []
    for i in range(len(est) - delta):
        rel_est = compose(inverse(est[i]), est[i + delta])
        rel_gt = compose(inverse(gt[i]), gt[i + delta])
        E = compose(inverse(rel_gt), rel_est)
        rte.append(E.translation_norm())
        rre.append(np.degrees(E.rotation_angle()))
    rte = np.array(rte)
    rre = np.array(rre)
    return TrajectoryMetrics(
        ate_rmse=float(np.sqrt(np.mean(err**2))),
        ate_mean=float(err.mean()),
        ate_std=float(err.std()),
        rte_mean=float(rte.mean()),
        rte_std=float(rte.std()),
        rre_mean=float(rre.mean()),
        rre_std=float(rre.std()),
        ate_rmse_unaligned=float(np.sqrt(np.mean(err_raw**2))),
        alignment="translation_only" if degenerate else "rigid",
    )


@dataclass(frozen=True)
class CloudMetrics:
    rmse: float
    matched_points: int
    registration: PoseSE3

    def as_dict(self) -> dict:
        qw, qx, qy, qz = self.registration.q
        tx, ty, tz = self.registration.t
        return {
            "rmse": self.rmse, "matched_points": self.matched_points,
            "registration": {"q": [qw, qx, qy, qz], "t": [tx, ty, tz]},
        }


@dataclass(frozen=True)
class IcpConfig:
    max_corr_dist: float = 3.0  # mm
    icp_iters: int = 50
    min_match_fraction: float = 0.10

    def __post_init__(self):
        if self.max_corr_dist <= 0 or self.icp_iters < 1:
            raise ValueError("max_corr_dist must be > 0 and icp_iters >= 1")


# brute force keeps lowest-index tie-breaking; trees are for big clouds where
# exact ties are not a concern
_BRUTE_FORCE_LIMIT = 2000


def _nearest_neighbors(ref: np.ndarray, query: np.ndarray, tree: Optional[cKDTree]):
    if tree is not None:
        dist, idx = tree.query(query, k=1)
        return np.asarray(dist), np.asarray(idx)
    d2 = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(query)), idx]), idx


def cloud_rmse(est_cloud: np.ndarray, gt_cloud: np.ndarray,
               cfg: Optional[IcpConfig] = None) -> CloudMetrics:
    """Point-to-point ICP of est onto gt, then RMSE over matched pairs.

    Correspondences beyond max_corr_dist are dropped each iteration;
    IcpDiverged when fewer than min_match_fraction of the est points find
    a partner.
    """
    if cfg is None:
        cfg = IcpConfig()
    est_cloud = np.asarray(est_cloud, dtype=float)
    gt_cloud = np.asarray(gt_cloud, dtype=float)
    if est_cloud.ndim != 2 or est_cloud.shape[1] != 3 or gt_cloud.ndim != 2 or gt_cloud.shape[1] != 3:
        raise ShapeMismatch("clouds must be (N, 3) arrays")
    if len(est_cloud) < 100 or len(gt_cloud) < 100:
        raise ValueError("clouds must hold at least 100 points")

    tree = cKDTree(gt_cloud) if len(gt_cloud) > _BRUTE_FORCE_LIMIT else None
    R_acc = np.eye(3)
    t_acc = np.zeros(3)
    moved = est_cloud
    rmse = np.inf
    matched = 0
    for _ in range(cfg.icp_iters):
        dist, idx = _nearest_neighbors(gt_cloud, moved, tree)
        keep = dist <= cfg.max_corr_dist
        matched = int(keep.sum())
        if matched < cfg.min_match_fraction * len(est_cloud):
            raise IcpDiverged(
                f"only {matched}/{len(est_cloud)} correspondences within "
                f"{cfg.max_corr_dist} mm"
            )
        src = moved[keep]
        dst = gt_cloud[idx[keep]]
        rmse = float(np.sqrt(np.mean(((src - dst) ** 2).sum(axis=1))))
        R, t, _ = rigid_align(src, dst)
        if np.abs(R - np.eye(3)).max() < 1e-15 and np.abs(t).max() < 1e-15:
            break
        R_acc = R @ R_acc
        t_acc = R @ t_acc + t
        moved = est_cloud @ R_acc.T + t_acc
    dist, idx = _nearest_neighbors(gt_cloud, moved, tree)
    keep = dist <= cfg.max_corr_dist
    matched = int(keep.sum())
    if matched < cfg.min_match_fraction * len(est_cloud):
        raise IcpDiverged(
            f"only {matched}/{len(est_cloud)} correspondences within "
            f"{cfg.max_corr_dist} mm"
        )
    rmse = float(np.sqrt(np.mean(((moved[keep] - gt_cloud[idx[keep]]) ** 2).sum(axis=1))))
    return CloudMetrics(rmse=rmse, matched_points=matched,
                        registration=PoseSE3.from_rt(R_acc, t_acc))
