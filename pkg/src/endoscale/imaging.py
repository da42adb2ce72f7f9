"""Raster containers and image-space operators.

Holds the dense single-channel types (intensity, depth, inverse depth,
brightness-offset fields) and the losses evaluated on them: bilinear
sampling, brightness calibration, SSIM, and the SSIM+L1 photometric loss.
View synthesis warps a source image into a target viewpoint using the
target's depth.

All functions are pure; rasters are immutable after construction.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from . import geometry
from .errors import EmptyMask, ShapeMismatch, UnitMismatch
from .geometry import Intrinsics, PoseSE3

UNITS_RELATIVE = "relative"
UNITS_MM = "mm"

DEFAULT_SSIM_WINDOW = 7
DEFAULT_PHOTO_ALPHA = 0.85  # SSIM-vs-L1 weight of the photometric loss


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageGray:
    """Single-channel intensity raster, values in [0, 1], row-major (v, u)."""

    data: np.ndarray

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """Dense depth raster with a validity mask and a units tag.

    units is "relative" (arbitrary global scale, the network-style output)
    or "mm" (metric).  Invalid pixels carry arbitrary data and are excluded
    from every loss and metric.
    """

    data: np.ndarray
    units: str = UNITS_RELATIVE
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {data.shape}")
        if self.units not in (UNITS_RELATIVE, UNITS_MM):
            raise ValueError(f"unknown units {self.units!r}")
        if self.valid is None:
            valid = np.isfinite(data) & (data > 0.0)
        else:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != data.shape:
                raise ValueError("validity mask shape differs from data shape")
            bad = valid & ~(np.isfinite(data) & (data > 0.0))
            if np.any(bad):
                raise ValueError("valid pixels must hold finite positive depth")
        valid.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass(frozen=True)
class InverseDepthMap:
    """Per-pixel inverse depth, >= 0 (0 marks no return)."""

    data: np.ndarray

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 2:
            raise ValueError(f"inverse depth must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0:
            raise ValueError("inverse depth must be finite and >= 0")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel additive brightness offsets (signed, |offset| <= 1)."""

    data: np.ndarray

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 2:
            raise ValueError(f"flow field must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or np.abs(data).max() > 1.0:
            raise ValueError("brightness offsets must be finite with |offset| <= 1")
        object.__setattr__(self, "data", data)


# --- sampling ---

def bilinear_sample_array(data: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear interpolation of raster `data` at continuous (u, v).

    Returns (values, valid); valid is False outside [0, w-1] x [0, h-1]
    (or where u/v is NaN).  Out-of-bounds values are 0.
    """
    h, w = data.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    with np.errstate(invalid="ignore"):
        valid = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.clip(np.floor(uc).astype(np.intp), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.intp), 0, max(h - 2, 0))
    fu = uc - u0
    fv = vc - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    p00 = data[v0, u0]
    p01 = data[v0, u1]
    p10 = data[v1, u0]
    p11 = data[v1, u1]
    top = p00 * (1.0 - fu) + p01 * fu
    bot = p10 * (1.0 - fu) + p11 * fu
    vals = top * (1.0 - fv) + bot * fv
    return np.where(valid, vals, 0.0), valid


def bilinear_sample_with_grad(data: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Like bilinear_sample_array but also returns d(value)/du, d(value)/dv.

    The gradients are the exact derivatives of the bilinear interpolant
    within each cell (the interpolant is piecewise bilinear, so these match
    finite differences of the sampled value away from cell boundaries).
    """
    h, w = data.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    with np.errstate(invalid="ignore"):
        valid = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.clip(np.floor(uc).astype(np.intp), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.intp), 0, max(h - 2, 0))
    fu = uc - u0
    fv = vc - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    p00 = data[v0, u0]
    p01 = data[v0, u1]
    p10 = data[v1, u0]
    p11 = data[v1, u1]
    vals = (p00 * (1 - fu) + p01 * fu) * (1 - fv) + (p10 * (1 - fu) + p11 * fu) * fv
    du = (p01 - p00) * (1 - fv) + (p11 - p10) * fv
    dv = (p10 - p00) * (1 - fu) + (p11 - p01) * fu
    zero = np.zeros_like(vals)
    return (
        np.where(valid, vals, 0.0),
        np.where(valid, du, zero),
        np.where(valid, dv, zero),
        valid,
    )


def bilinear_sample(img: ImageGray, p):
    """Sample one pixel; returns (intensity, valid)."""
    vals, valid = bilinear_sample_array(img.data, np.array([p[0]]), np.array([p[1]]))
    return float(vals[0]), bool(valid[0])


# --- depth conversions ---

def invert_depth(idm: InverseDepthMap, eps: float = 1e-4) -> DepthMap:
    """Reciprocal conversion; pixels with inverse depth < eps become invalid."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    valid = idm.data >= eps
    safe = np.where(valid, idm.data, 1.0)
    return DepthMap(data=np.where(valid, 1.0 / safe, 0.0), units=UNITS_RELATIVE, valid=valid)


def depth_to_inverse(d: DepthMap) -> DepthMap:
    """Reciprocal of valid depth pixels as an InverseDepthMap."""
    inv = np.where(d.valid, 1.0 / np.where(d.valid, d.data, 1.0), 0.0)
    return InverseDepthMap(data=inv)


# --- brightness calibration ---

def apply_appearance_flow(img: ImageGray, flow: FlowField) -> ImageGray:
    """Add the per-pixel brightness offsets and clamp back to [0, 1]."""
    if img.data.shape != flow.data.shape:
        raise ShapeMismatch(
            f"image {img.data.shape} vs flow {flow.data.shape}"
        )
    return ImageGray(data=np.clip(img.data + flow.data, 0.0, 1.0))


# --- SSIM and photometric loss ---

def _box_mean(a: np.ndarray, window: int) -> np.ndarray:
    # interior values (>= window//2 from every edge) are exact box averages
    return uniform_filter(a, size=window, mode="constant")


def ssim(a: ImageGray, b: ImageGray, window: int = DEFAULT_SSIM_WINDOW):
    """Structural similarity with a uniform box window on range [0, 1].

    Returns (mean, map); the map is full-size with NaN on the border strip
    where the window does not fit, and the mean is taken over the interior.
    C1 = 0.01^2, C2 = 0.03^2.
    """
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{a.data.shape} vs {b.data.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    return _ssim_map(a.data, b.data, window)


def _ssim_map(x: np.ndarray, y: np.ndarray, window: int):
    h, w = x.shape
    r = window // 2
    if h < window or w < window:
        raise ShapeMismatch(f"image {x.shape} smaller than {window}x{window} window")
    c1 = 0.01**2
    c2 = 0.03**2
    mu_x = _box_mean(x, window)
    mu_y = _box_mean(y, window)
    sig_x = _box_mean(x * x, window) - mu_x * mu_x
    sig_y = _box_mean(y * y, window) - mu_y * mu_y
    sig_xy = _box_mean(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sig_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
    full = num / den
    out = np.full_like(full, np.nan)
    out[r : h - r, r : w - r] = full[r : h - r, r : w - r]
    interior = full[r : h - r, r : w - r]
    return float(interior.mean()), out


def photometric_loss(
    target: ImageGray,
    synth: ImageGray,
    alpha: float = DEFAULT_PHOTO_ALPHA,
    mask: Optional[np.ndarray] = None,
    window: int = DEFAULT_SSIM_WINDOW,
) -> float:
    """alpha * (1 - SSIM)/2 + (1 - alpha) * mean L1, over masked pixels."""
    if target.data.shape != synth.data.shape:
        raise ShapeMismatch(f"{target.data.shape} vs {synth.data.shape}")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if mask is None:
        mask = np.ones(target.data.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != target.data.shape:
            raise ShapeMismatch("mask shape differs from image shape")
    if not mask.any():
        raise EmptyMask("no valid pixel for photometric loss")
    l1 = float(np.abs(target.data - synth.data)[mask].mean())
    if alpha == 0.0:
        return l1
    _, smap = _ssim_map(target.data, synth.data, window)
    sel = mask & np.isfinite(smap)
    if not sel.any():
        raise EmptyMask("mask leaves no pixel inside the SSIM interior")
    s = float(smap[sel].mean())
    return alpha * (1.0 - s) / 2.0 + (1.0 - alpha) * l1


# --- view synthesis ---

def synthesize_view(source: ImageGray, target_depth: DepthMap, t: PoseSE3, k: Intrinsics):
    """Warp `source` into the target view given the target's depth.

    t maps target-frame points into the source frame.  Returns
    (ImageGray, mask); mask is False where the target depth is invalid, the
    warped point lies behind the camera, or the sample lands out of bounds.
    """
    if target_depth.data.shape != source.data.shape:
        raise ShapeMismatch(
            f"source {source.data.shape} vs target depth {target_depth.data.shape}"
        )
    if not target_depth.valid.any():
        raise EmptyMask("target depth has no valid pixel")
    h, w = target_depth.data.shape
    vv, uu = np.mgrid[0:h, 0:w]
    d = np.where(target_depth.valid, target_depth.data, 1.0)
    pts = geometry.backproject_pixels(uu.ravel(), vv.ravel(), d.ravel(), k)
    pts = t.apply(pts)
    us, vs, in_front = geometry.project_points(pts, k)
    vals, sample_ok = bilinear_sample_array(source.data, us, vs)
    mask = (target_depth.valid.ravel() & in_front & sample_ok).reshape(h, w)
    out = np.where(mask, vals.reshape(h, w), 0.0)
    return ImageGray(data=out), mask


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for (h, w, 3) arrays in [0, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeMismatch(f"expected (h, w, 3), got {rgb.shape}")
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
