"""Frame-to-frame direct pose estimation.

Estimates the rigid transform T mapping points of frame_i into frame_j by
minimizing, over all valid pixels p of frame_i,

    w_geo  * huber( D_j(W(p, T)) - [T * backproject(p, D_i(p))]_z )
  + w_photo* huber( I_j(W(p, T)) - I_i(p) )

with a Levenberg-Marquardt-damped Gauss-Newton loop over the se(3) twist,
coarse-to-fine over an image pyramid.  Depth residuals use bilinearly
interpolated D_j; both residual types use the exact gradient of the
bilinear interpolant so the analytic Jacobians match finite differences.

Both frames must carry depth in the same units; huber deltas are expressed
in those units (intensity units for the photometric delta).
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from . import geometry
from .errors import Diverged, InsufficientOverlap
from .geometry import Intrinsics, PoseSE3, Z_EPS, compose, se3_exp
from .imaging import DepthMap, ImageGray, bilinear_sample_array, bilinear_sample_with_grad

GEO_OUTLIER_FACTOR = 10.0  # residuals beyond this multiple of the huber delta are dropped


@dataclass(frozen=True)
class OdometryConfig:
    pyramid_levels: int = 3
    max_iters_per_level: int = 30
    huber_delta_photo: float = 0.05
    huber_delta_geo: float = 0.1
    w_geo: float = 1.0
    w_photo: float = 1.0
    convergence_eps: float = 1e-7
    min_valid_pixels: int = 500
    # fraction of valid pixels kept at the finest level, selected by image
    # gradient magnitude; 1.0 keeps everything
    gradient_keep: float = 0.5

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        for name in ("max_iters_per_level", "huber_delta_photo", "huber_delta_geo",
                     "w_geo", "w_photo", "convergence_eps", "min_valid_pixels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.gradient_keep <= 1.0):
            raise ValueError("gradient_keep must be in (0, 1]")


@dataclass(frozen=True)
class Frame:
    """One brightness-calibrated image + its depth map + camera model."""

    image: ImageGray
    depth: DepthMap
    intrinsics: Intrinsics
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.image.data.shape != shape or self.depth.data.shape != shape:
            raise ValueError(
                f"image {self.image.data.shape} / depth {self.depth.data.shape} "
                f"do not match intrinsics {shape}"
            )
        if self.depth.valid_fraction() < 0.01:
            raise ValueError("depth map has fewer than 1% valid pixels")

    @cached_property
    def pyramid(self):
        """Levels finest-first: [(image, depth, valid, intrinsics), ...]."""
        levels = [(self.image.data, self.depth.data, self.depth.valid, self.intrinsics)]
        img, dep, val, intr = levels[0]
        while min(intr.width, intr.height) >= 8:
            img, dep, val = _downsample(img, dep, val)
            intr = intr.halved()
            levels.append((img, dep, val, intr))
        return levels


def _downsample(img, dep, val):
    """One pyramid step: 2x2 box filter on intensity, valid-aware min on depth."""
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    dep = dep[: 2 * h2, : 2 * w2]
    val = val[: 2 * h2, : 2 * w2]
    blocks_i = img.reshape(h2, 2, w2, 2)
    img_d = blocks_i.mean(axis=(1, 3))
    blocks_d = dep.reshape(h2, 2, w2, 2)
    blocks_v = val.reshape(h2, 2, w2, 2)
    # min over valid entries preserves occlusion boundaries
    big = np.where(blocks_v, blocks_d, np.inf)
    dep_d = big.min(axis=(1, 3))
    val_d = blocks_v.any(axis=(1, 3))
    dep_d = np.where(val_d, dep_d, 0.0)
    return img_d, dep_d, val_d


def _image_gradient_mag(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


@dataclass
class _LevelData:
    """Per-level pixel selection of frame_i, precomputed once."""

    u: np.ndarray   # (N,)
    v: np.ndarray
    d: np.ndarray   # frame_i depth at the selected pixels
    i0: np.ndarray  # frame_i intensity at the selected pixels
    img_j: np.ndarray
    dep_j: np.ndarray
    val_j: np.ndarray
    intr: Intrinsics


def _select_pixels(frame_i: Frame, frame_j: Frame, level: int, cfg: OdometryConfig) -> _LevelData:
    img_i, dep_i, val_i, intr = frame_i.pyramid[level]
    img_j, dep_j, val_j, _ = frame_j.pyramid[level]
    vv, uu = np.nonzero(val_i)
    if level == 0 and cfg.gradient_keep < 1.0 and vv.size > 4 * cfg.min_valid_pixels:
        mag = _image_gradient_mag(img_i)[vv, uu]
        thresh = np.quantile(mag, 1.0 - cfg.gradient_keep)
        keep = mag >= thresh
        vv, uu = vv[keep], uu[keep]
    return _LevelData(
        u=uu.astype(float),
        v=vv.astype(float),
        d=dep_i[vv, uu],
        i0=img_i[vv, uu],
        img_j=img_j,
        dep_j=dep_j,
        val_j=val_j,
        intr=intr,
    )


def _valid_depth_samples(val_j: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """True where all four bilinear neighbors of (u, v) hold valid depth."""
    h, w = val_j.shape
    with np.errstate(invalid="ignore"):
        inb = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uc = np.where(inb, u, 0.0)
    vc = np.where(inb, v, 0.0)
    u0 = np.clip(np.floor(uc).astype(np.intp), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.intp), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    ok = val_j[v0, u0] & val_j[v0, u1] & val_j[v1, u0] & val_j[v1, u1]
    return inb & ok


def _interp_depth(dep_j: np.ndarray, val_j: np.ndarray, u: np.ndarray, v: np.ndarray):
    vals, ok = bilinear_sample_array(dep_j, u, v)
    return vals, ok & _valid_depth_samples(val_j, u, v)


def _saturation_cost(cfg: OdometryConfig, gate: float) -> float:
    """Worst-case per-pixel robustified cost given the outlier gate.

    A pixel inside the valid set can never cost more than this (the
    geometric residual is capped by the gate, the photometric one by the
    intensity range); it bounds the cost jump when one pixel enters or
    leaves the valid set.
    """
    dg, dp = cfg.huber_delta_geo, cfg.huber_delta_photo
    sat_geo = 2.0 * dg * gate - dg * dg if gate > dg else gate * gate
    sat_photo = 2.0 * dp * 1.0 - dp * dp if 1.0 > dp else 1.0
    return cfg.w_geo * sat_geo + cfg.w_photo * sat_photo


def _evaluate(lv: _LevelData, T: PoseSE3, cfg: OdometryConfig, with_jac: bool,
              gate: Optional[float] = None):
    """Residuals (and normal equations) of the combined cost at pose T.

    Returns (cost, n_valid, H, g); cost is the mean robustified residual
    over the valid pixels.  H/g are None unless with_jac.  `gate` fixes
    the geometric outlier threshold; None derives it from the residual
    distribution at T.
    """
    intr = lv.intr
    pts = geometry.backproject_pixels(lv.u, lv.v, lv.d, intr)
    R = T.rotation()
    q = pts @ R.T + T.t  # (N, 3) points in frame_j coords
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    in_front = z > Z_EPS
    zs = np.where(in_front, z, 1.0)
    uj = intr.fx * x / zs + intr.cx
    vj = intr.fy * y / zs + intr.cy
    uj = np.where(in_front, uj, -1.0)  # forces out-of-bounds below

    dj, dj_du, dj_dv, dj_ok = bilinear_sample_with_grad(lv.dep_j, uj, vj)
    dj_ok &= _valid_depth_samples(lv.val_j, uj, vj)
    ij, ij_du, ij_dv, ij_ok = bilinear_sample_with_grad(lv.img_j, uj, vj)

    r_geo = dj - z
    r_photo = ij - lv.i0

    valid = in_front & dj_ok & ij_ok
    if gate is None and valid.any():
        # occlusion gate on the geometric residual; the median-based floor
        # keeps the basin of convergence when the pose is still far off,
        # tightening to the fixed 10x-delta gate near the fit
        gate = GEO_OUTLIER_FACTOR * cfg.huber_delta_geo
        gate = max(gate, 6.0 * float(np.median(np.abs(r_geo[valid]))))
    elif gate is None:
        gate = GEO_OUTLIER_FACTOR * cfg.huber_delta_geo
    valid &= np.abs(r_geo) <= gate
    n_valid = int(valid.sum())
    if n_valid == 0:
        return np.inf, 0, None, None

    ag = np.abs(r_geo)
    ap = np.abs(r_photo)
    dg, dp = cfg.huber_delta_geo, cfg.huber_delta_photo
    # huber cost: r^2 inside the delta, 2*delta*|r| - delta^2 outside
    cost_geo = np.where(ag <= dg, r_geo**2, 2 * dg * ag - dg**2)
    cost_photo = np.where(ap <= dp, r_photo**2, 2 * dp * ap - dp**2)
    cost = float((cfg.w_geo * cost_geo + cfg.w_photo * cost_photo)[valid].sum() / n_valid)

    if not with_jac:
        return cost, n_valid, None, None

    # IRLS weights: 1 inside the delta, delta/|r| outside
    w_g = cfg.w_geo * np.where(ag <= dg, 1.0, dg / np.maximum(ag, 1e-30))
    w_p = cfg.w_photo * np.where(ap <= dp, 1.0, dp / np.maximum(ap, 1e-30))

    # du/d(twist), dv/d(twist), dz/d(twist) for left-multiplied exp(xi)*T,
    # twist ordered (omega, v)
    fx, fy = intr.fx, intr.fy
    iz = 1.0 / zs
    iz2 = iz * iz
    du = np.empty((lv.u.size, 6))
    dv = np.empty((lv.u.size, 6))
    du[:, 0] = -fx * x * y * iz2
    du[:, 1] = fx * (1.0 + x * x * iz2)
    du[:, 2] = -fx * y * iz
    du[:, 3] = fx * iz
    du[:, 4] = 0.0
    du[:, 5] = -fx * x * iz2
    dv[:, 0] = -fy * (1.0 + y * y * iz2)
    dv[:, 1] = fy * x * y * iz2
    dv[:, 2] = fy * x * iz
    dv[:, 3] = 0.0
    dv[:, 4] = fy * iz
    dv[:, 5] = -fy * y * iz2
    dz = np.zeros((lv.u.size, 6))
    dz[:, 0] = y
    dz[:, 1] = -x
    dz[:, 5] = 1.0

    J_geo = dj_du[:, None] * du + dj_dv[:, None] * dv - dz
    J_photo = ij_du[:, None] * du + ij_dv[:, None] * dv

    sel = valid
    Jg = J_geo[sel]
    Jp = J_photo[sel]
    rg = r_geo[sel]
    rp = r_photo[sel]
    wg = w_g[sel]
    wp = w_p[sel]
    H = (Jg * wg[:, None]).T @ Jg + (Jp * wp[:, None]).T @ Jp
    g = (Jg * (wg * rg)[:, None]).sum(axis=0) + (Jp * (wp * rp)[:, None]).sum(axis=0)
    return cost, n_valid, H, g


@dataclass(frozen=True)
class OdometryDiagnostics:
    iterations: tuple
    final_cost: float
    n_valid: int
    converged: bool


def estimate_pose(
    frame_i: Frame,
    frame_j: Frame,
    init: Optional[PoseSE3] = None,
    cfg: Optional[OdometryConfig] = None,
):
    """Coarse-to-fine LM-damped Gauss-Newton alignment of frame_i to frame_j.

    Returns (PoseSE3 mapping frame_i points into frame_j, diagnostics).
    Raises InsufficientOverlap when the finest level has fewer valid
    residuals than cfg.min_valid_pixels, Diverged when damping cannot find
    a downhill step five times in a row.
    """
    if cfg is None:
        cfg = OdometryConfig()
    if init is None:
        init = PoseSE3.identity()
    if frame_i.intrinsics != frame_j.intrinsics:
        raise ValueError("frames must share intrinsics")

    n_levels = min(cfg.pyramid_levels, len(frame_i.pyramid), len(frame_j.pyramid))
    T = init
    iter_counts = []
    final_cost = np.inf
    final_valid = 0
    converged = False

    for level in range(n_levels - 1, -1, -1):
        lv = _select_pixels(frame_i, frame_j, level, cfg)
        min_needed = cfg.min_valid_pixels if level == 0 else 12
        # derive the outlier gate from the residuals at the level's starting
        # pose, then hold it fixed so the cost stays stationary across the
        # level's iterations
        pts0 = geometry.backproject_pixels(lv.u, lv.v, lv.d, lv.intr)
        q0 = pts0 @ T.rotation().T + T.t
        u0, v0, front0 = geometry.project_points(q0, lv.intr)
        dj0, ok0 = _interp_depth(lv.dep_j, lv.val_j, u0, v0)
        r0 = np.abs(dj0 - q0[:, 2])[front0 & ok0]
        gate = GEO_OUTLIER_FACTOR * cfg.huber_delta_geo
        if r0.size:
            gate = max(gate, 6.0 * float(np.median(r0)))
        sat = _saturation_cost(cfg, gate)
        cost, n_valid, H, g = _evaluate(lv, T, cfg, with_jac=True, gate=gate)
        if n_valid < min_needed:
            if level == 0:
                raise InsufficientOverlap(
                    f"{n_valid} valid residuals at finest level, need {cfg.min_valid_pixels}"
                )
            iter_counts.append(0)
            continue

        lam = 1e-4
        fails = 0
        its = 0
        converged = False
        for _ in range(cfg.max_iters_per_level):
            its += 1
            Hd = H + lam * np.diag(np.diag(H))
            try:
                dx = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            dx_norm = np.linalg.norm(dx)
            if dx_norm < cfg.convergence_eps:
                converged = True
                break
            T_new = compose(se3_exp(dx), T)
            cost_new, n_new, H_new, g_new = _evaluate(lv, T_new, cfg, with_jac=True, gate=gate)
            # once steps are small, cost changes within the saturation
            # quantum of the pixels that entered/left the valid set are the
            # resolution floor of the objective, not progress or divergence
            small_step = dx_norm <= 3e-3
            flaps = abs(n_new - n_valid)
            plateau = max(1e-7 * cost, 2.0 * flaps * sat / max(n_valid, 1))
            if n_new >= min_needed and cost_new < cost:
                improved = (cost - cost_new) > plateau
                T, cost, n_valid, H, g = T_new, cost_new, n_new, H_new, g_new
                lam = max(lam / 3.0, 1e-9)
                fails = 0
                if small_step and not improved:
                    converged = True
                    break
            elif n_new >= min_needed and small_step and cost_new - cost <= plateau:
                converged = True
                break
            else:
                lam *= 10.0
                fails += 1
                if fails >= 5:
                    raise Diverged(
                        f"cost increased for {fails} consecutive damped steps "
                        f"at pyramid level {level}"
                    )
        iter_counts.append(its)
        final_cost = cost
        final_valid = n_valid

    if final_valid < cfg.min_valid_pixels:
        raise InsufficientOverlap(
            f"{final_valid} valid residuals at finest level, need {cfg.min_valid_pixels}"
        )
    diag = OdometryDiagnostics(
        iterations=tuple(iter_counts),
        final_cost=final_cost,
        n_valid=final_valid,
        converged=converged,
    )
    return T, diag


# --- per-pixel residual surface (spec-level API, also used for Jacobian checks) ---

def geo_residual(frame_i: Frame, frame_j: Frame, t: PoseSE3, p):
    """Depth residual at one pixel: D_j(warp(p)) - z of the transformed point.

    Returns (value, valid); valid is False when the warp leaves the image,
    lands on invalid depth, or the source pixel itself has no valid depth.
    """
    r_geo, _, r_photo, _, ok_g, _ = _pixel_residuals(frame_i, frame_j, t, p)
    return r_geo, ok_g


def photo_residual(frame_i: Frame, frame_j: Frame, t: PoseSE3, p):
    """Intensity residual at one pixel: I_j(warp(p)) - I_i(p)."""
    r_geo, _, r_photo, _, _, ok_p = _pixel_residuals(frame_i, frame_j, t, p)
    return r_photo, ok_p


def _pixel_residuals(frame_i: Frame, frame_j: Frame, t: PoseSE3, p):
    u, v = float(p[0]), float(p[1])
    ui, vi = int(round(u)), int(round(v))
    h, w = frame_i.depth.data.shape
    if not (0 <= ui < w and 0 <= vi < h) or not frame_i.depth.valid[vi, ui]:
        return np.nan, np.zeros(6), np.nan, np.zeros(6), False, False
    d = frame_i.depth.data[vi, ui]
    i0 = frame_i.image.data[vi, ui]
    pt = geometry.backproject_pixels(np.array([u]), np.array([v]), np.array([d]), frame_i.intrinsics)
    q = t.apply(pt)[0]
    if q[2] <= Z_EPS:
        return np.nan, np.zeros(6), np.nan, np.zeros(6), False, False
    intr = frame_i.intrinsics
    uj = intr.fx * q[0] / q[2] + intr.cx
    vj = intr.fy * q[1] / q[2] + intr.cy
    dj, dj_du, dj_dv, ok_d = bilinear_sample_with_grad(
        frame_j.depth.data, np.array([uj]), np.array([vj])
    )
    ok_d = bool(ok_d[0]) and bool(
        _valid_depth_samples(frame_j.depth.valid, np.array([uj]), np.array([vj]))[0]
    )
    ij, ij_du, ij_dv, ok_i = bilinear_sample_with_grad(
        frame_j.image.data, np.array([uj]), np.array([vj])
    )
    ok_i = bool(ok_i[0])

    x, y, z = q
    fx, fy = intr.fx, intr.fy
    iz = 1.0 / z
    iz2 = iz * iz
    du = np.array([-fx * x * y * iz2, fx * (1 + x * x * iz2), -fx * y * iz,
                   fx * iz, 0.0, -fx * x * iz2])
    dv = np.array([-fy * (1 + y * y * iz2), fy * x * y * iz2, fy * x * iz,
                   0.0, fy * iz, -fy * y * iz2])
    dz = np.array([y, -x, 0.0, 0.0, 0.0, 1.0])
    J_geo = dj_du[0] * du + dj_dv[0] * dv - dz
    J_photo = ij_du[0] * du + ij_dv[0] * dv
    return float(dj[0] - z), J_geo, float(ij[0] - i0), J_photo, ok_d, ok_i


def residual_jacobians(frame_i: Frame, frame_j: Frame, t: PoseSE3, pixels):
    """Analytic per-pixel residuals and twist Jacobians at pose t.

    pixels is an iterable of (u, v).  Returns a list of dicts with keys
    r_geo, J_geo, r_photo, J_photo, valid.  The Jacobians are w.r.t. a
    left-multiplied twist: d/dxi of residual(exp(xi) * t) at xi=0.
    """
    out = []
    for p in pixels:
        r_geo, J_geo, r_photo, J_photo, ok_g, ok_p = _pixel_residuals(frame_i, frame_j, t, p)
        out.append(
            dict(r_geo=r_geo, J_geo=J_geo, r_photo=r_photo, J_photo=J_photo,
                 valid=ok_g and ok_p)
        )
    return out
