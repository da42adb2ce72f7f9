"""Synthetic scene rendering: the built-in ground-truth oracle.

Ray-casts analytic surfaces (plane, sphere cap, smooth heightfield) under a
pinhole camera along a known trajectory.  Depth is the analytic ray depth,
so there is no mesh discretization error; texture is a smooth procedural
field attached to world coordinates, which makes renders from different
viewpoints photometrically consistent up to interpolation.

Outputs mirror the pipeline's inputs: grayscale images, metric depth (mm),
relative depth (= metric / true_scale), a kinematics trajectory, and
optional brightness-perturbed images with their ground-truth correction
fields.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import NoSurfaceVisible
from .geometry import Intrinsics, PoseSE3, se3_exp
from .imaging import DepthMap, FlowField, ImageGray, UNITS_MM, UNITS_RELATIVE
from .kinematics import KinematicsTrajectory, KinematicsEntry


# --- surfaces (world frame = first camera frame; +z into the scene) ---

@dataclass(frozen=True)
class Plane:
    """Fronto-parallel plane z = depth_mm in the world frame."""

    depth_mm: float


@dataclass(frozen=True)
class SphereCap:
    """Sphere of radius_mm centered at center_mm; rays hit the near side."""

    center_mm: tuple
    radius_mm: float


@dataclass(frozen=True)
class Heightfield:
    """Smooth surface z = base_mm + bumps of amplitude_mm at frequency cycles/mm."""

    base_mm: float
    amplitude_mm: float
    frequency: float
    octaves: int = 3
    seed: int = 7


Surface = Union[Plane, SphereCap, Heightfield]


_HF_PARAM_CACHE: dict = {}


def _heightfield_params(hf: Heightfield):
    key = (hf.frequency, hf.octaves, hf.seed)
    cached = _HF_PARAM_CACHE.get(key)
    if cached is not None:
        return cached
    rng = np.random.default_rng(hf.seed)
    freqs, angles, phases, weights = [], [], [], []
    for k in range(hf.octaves):
        freqs.append(hf.frequency * 2.0**k)
        angles.append(rng.uniform(0.0, 2.0 * np.pi))
        phases.append(rng.uniform(0.0, 2.0 * np.pi))
        weights.append(0.6**k)
    wsum = sum(weights)
    params = (
        np.array(freqs),
        np.array(angles),
        np.array(phases),
        np.array(weights) / wsum,
    )
    _HF_PARAM_CACHE[key] = params
    return params


def _heightfield_z(hf: Heightfield, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    freqs, angles, phases, weights = _heightfield_params(hf)
    out = np.zeros_like(x)
    for f, a, p, w in zip(freqs, angles, phases, weights):
        out += w * np.sin(2.0 * np.pi * f * (x * np.cos(a) + y * np.sin(a)) + p)
    return hf.base_mm + hf.amplitude_mm * out


# --- texture ---

@dataclass(frozen=True)
class Texture:
    """Multi-octave sinusoidal value noise over world (x, y), range-limited.

    contrast is the half-range of the intensity swing around 0.5; it must
    be positive, otherwise images are flat and photometric alignment is
    uninformative.
    """

    seed: int = 0
    base_frequency: float = 0.08  # cycles per mm
    octaves: int = 4
    contrast: float = 0.4

    def __post_init__(self):
        if not (0.0 < self.contrast <= 0.45):
            raise ValueError("texture contrast must be in (0, 0.45]")
        if self.octaves < 1:
            raise ValueError("texture needs at least one octave")


def _texture_eval(tex: Texture, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(tex.seed)
    total = np.zeros_like(x)
    wsum = 0.0
    for k in range(tex.octaves):
        f = tex.base_frequency * 2.0**k
        a = rng.uniform(0.0, 2.0 * np.pi)
        p = rng.uniform(0.0, 2.0 * np.pi)
        w = 0.55**k
        total += w * np.sin(2.0 * np.pi * f * (x * np.cos(a) + y * np.sin(a)) + p)
        wsum += w
    return 0.5 + tex.contrast * total / wsum


# --- brightness perturbation (stands in for illumination change) ---

@dataclass(frozen=True)
class BrightnessSpec:
    """Smooth per-frame additive intensity field in pixel space."""

    seed: int = 0
    amplitude: float = 0.15
    cycles: float = 1.5  # spatial cycles across the image width

    def __post_init__(self):
        if not (0.0 <= self.amplitude <= 0.5):
            raise ValueError("brightness amplitude must be in [0, 0.5]")


def _brightness_field(spec: BrightnessSpec, frame_idx: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, frame_idx]))
    a1 = rng.uniform(0.0, 2.0 * np.pi)
    p1 = rng.uniform(0.0, 2.0 * np.pi)
    p2 = rng.uniform(0.0, 2.0 * np.pi)
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    un = uu / max(w - 1, 1)
    vn = vv / max(h - 1, 1)
    f = np.sin(2 * np.pi * spec.cycles * (un * np.cos(a1) + vn * np.sin(a1)) + p1)
    f += 0.5 * np.sin(2 * np.pi * spec.cycles * 2.0 * (un * np.cos(a1 + 1.3) + vn * np.sin(a1 + 1.3)) + p2)
    return spec.amplitude * f / 1.5


# --- trajectories ---

def line_path(n: int, step_mm, rot_step_deg: float = 0.0, rot_axis=(0.0, 1.0, 0.0)) -> List[PoseSE3]:
    """Camera-to-world poses along a straight line with constant rotation rate."""
    axis = np.asarray(rot_axis, dtype=float)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0 else np.array([0.0, 1.0, 0.0])
    step = np.asarray(step_mm, dtype=float)
    poses = []
    for i in range(n):
        w = axis * math.radians(rot_step_deg) * i
        rot = se3_exp(np.concatenate([w, np.zeros(3)]))
        poses.append(PoseSE3(q=rot.q, t=step * i))
    return poses


def arc_path(n: int, radius_mm: float, total_angle_deg: float, look_depth_mm: float) -> List[PoseSE3]:
    """Sweep along a horizontal arc while keeping a fixation point in view.

    The camera starts at the world origin and orbits a point at
    (0, 0, look_depth_mm); useful for sphere-cap sweeps.
    """
    poses = []
    pivot = np.array([0.0, 0.0, look_depth_mm])
    for i in range(n):
        ang = math.radians(total_angle_deg) * (i / max(n - 1, 1))
        w = np.array([0.0, ang, 0.0])
        T_rot = se3_exp(np.concatenate([w, np.zeros(3)]))
        R = T_rot.rotation()
        cam_pos = pivot - R @ pivot
        poses.append(PoseSE3(q=T_rot.q, t=cam_pos))
    return poses


# --- scene spec ---

@dataclass(frozen=True)
class SceneSpec:
    surface: Surface
    intrinsics: Intrinsics
    trajectory: Sequence[PoseSE3]
    true_scale: float = 7.5  # mm per relative depth unit
    texture: Texture = field(default_factory=Texture)
    brightness: Optional[BrightnessSpec] = None
    fps: float = 25.0

    def __post_init__(self):
        if self.true_scale <= 0:
            raise ValueError("true_scale must be positive")
        if len(self.trajectory) < 2:
            raise ValueError("need at least 2 frames")


@dataclass(frozen=True)
class SynthFrame:
    image: ImageGray
    depth_mm: DepthMap
    depth_rel: DepthMap
    pose: PoseSE3  # camera-to-world
    timestamp: float
    image_perturbed: Optional[ImageGray] = None
    flow: Optional[FlowField] = None


@dataclass(frozen=True)
class RenderedSequence:
    frames: List[SynthFrame]
    kinematics: KinematicsTrajectory
    spec: SceneSpec


def _ray_depths(surface: Surface, origin: np.ndarray, dirs_w: np.ndarray) -> np.ndarray:
    """Depth along each ray (camera z of the hit); NaN where the ray misses.

    dirs_w are world-frame ray directions whose camera-frame z component is
    1, so the ray parameter t equals camera depth.
    """
    if isinstance(surface, Plane):
        dz = dirs_w[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (surface.depth_mm - origin[2]) / dz
        t = np.where((dz > 1e-12) & (t > 0), t, np.nan)
        return t
    if isinstance(surface, SphereCap):
        c = np.asarray(surface.center_mm, dtype=float)
        oc = origin - c
        a = np.einsum("ij,ij->i", dirs_w, dirs_w)
        b = 2.0 * dirs_w @ oc
        cq = oc @ oc - surface.radius_mm**2
        disc = b * b - 4.0 * a * cq
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t = (-b - sq) / (2.0 * a)  # near intersection
        return np.where(t > 0, t, np.nan)
    if isinstance(surface, Heightfield):
        return _raycast_heightfield(surface, origin, dirs_w)
    raise TypeError(f"unknown surface type {type(surface).__name__}")


def _raycast_heightfield(hf: Heightfield, origin: np.ndarray, dirs_w: np.ndarray) -> np.ndarray:
    # g(t) = ray_z(t) - surface_z(x(t), y(t)); bracket by the amplitude
    # bounds, then bisect.  Assumes dz > 0 (camera looks into the field).
    # The sinusoid arguments are linear in t, so precompute per-ray
    # phase = A_k + B_k * t per octave and the bisection loop reduces to a
    # handful of fused multiply-add + sin passes.
    dz = dirs_w[:, 2]
    ok = dz > 1e-9
    amp = abs(hf.amplitude_mm)
    t_lo = (hf.base_mm - amp - origin[2]) / np.where(ok, dz, 1.0)
    t_hi = (hf.base_mm + amp - origin[2]) / np.where(ok, dz, 1.0)
    t_lo = np.maximum(t_lo, 1e-6)
    t_hi = np.maximum(t_hi, t_lo + 1e-6)

    freqs, angles, phases, weights = _heightfield_params(hf)
    two_pi = 2.0 * np.pi
    A = []
    B = []
    for f, a, p in zip(freqs, angles, phases):
        ca, sa = np.cos(a), np.sin(a)
        A.append(two_pi * f * (ca * origin[0] + sa * origin[1]) + p)
        B.append(two_pi * f * (ca * dirs_w[:, 0] + sa * dirs_w[:, 1]))

    def g(t):
        bumps = np.zeros_like(t)
        for a0, b, w in zip(A, B, weights):
            bumps += w * np.sin(a0 + b * t)
        return origin[2] + t * dz - hf.base_mm - hf.amplitude_mm * bumps

    lo, hi = t_lo.copy(), t_hi.copy()
    g_lo = g(lo)
    # the bracket must straddle the surface; rays with g(lo) > 0 start below
    # the lowest bump (nearly impossible with a sensible spec) and miss
    ok &= g_lo <= 0
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        below = g(mid) <= 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    return np.where(ok & (t > 0), t, np.nan)


def render_frame(spec: SceneSpec, frame_idx: int):
    """Render one frame; returns a SynthFrame.  Raises NoSurfaceVisible."""
    intr = spec.intrinsics
    pose = spec.trajectory[frame_idx]
    h, w = intr.height, intr.width
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    dirs_cam = np.stack(
        [(uu.ravel() - intr.cx) / intr.fx, (vv.ravel() - intr.cy) / intr.fy,
         np.ones(h * w)], axis=1
    )
    R = pose.rotation()
    dirs_w = dirs_cam @ R.T
    depth = _ray_depths(spec.surface, pose.t, dirs_w)
    hit = np.isfinite(depth)
    if not hit.any():
        raise NoSurfaceVisible(frame_idx)
    pts_w = pose.t[None, :] + np.where(hit, depth, 0.0)[:, None] * dirs_w
    tex = _texture_eval(spec.texture, pts_w[:, 0], pts_w[:, 1])
    img = np.where(hit, np.clip(tex, 0.0, 1.0), 0.0).reshape(h, w)
    dmap = np.where(hit, depth, 0.0).reshape(h, w)
    valid = hit.reshape(h, w)
    depth_mm = DepthMap(data=dmap, units=UNITS_MM, valid=valid)
    depth_rel = DepthMap(data=dmap / spec.true_scale, units=UNITS_RELATIVE, valid=valid)
    image = ImageGray(data=img)
    ts = frame_idx / spec.fps

    img_pert = None
    flow = None
    if spec.brightness is not None:
        b = _brightness_field(spec.brightness, frame_idx, h, w)
        img_pert = ImageGray(data=np.clip(img + b, 0.0, 1.0))
        # the correction field that undoes the perturbation
        flow = FlowField(data=np.clip(-b, -1.0, 1.0))
    return SynthFrame(
        image=image, depth_mm=depth_mm, depth_rel=depth_rel, pose=pose,
        timestamp=ts, image_perturbed=img_pert, flow=flow,
    )


def render_sequence(spec: SceneSpec, lever_arm_mm=None, kin_noise_sigma_mm: float = 0.0,
                    kin_noise_seed: int = 0) -> RenderedSequence:
    """Render all frames plus the kinematics trajectory.

    lever_arm_mm optionally offsets the reported kinematic positions by a
    rigid camera-frame offset (probes the translation-norm proportionality
    assumption); default None keeps kinematics identical to camera poses.
    """
    frames = [render_frame(spec, i) for i in range(len(spec.trajectory))]
    entries = []
    rng = np.random.default_rng(kin_noise_seed)
    for i, f in enumerate(frames):
        pose = f.pose
        if lever_arm_mm is not None:
            arm = np.asarray(lever_arm_mm, dtype=float)
            pose = PoseSE3(q=pose.q, t=pose.t + pose.rotation() @ arm)
        if kin_noise_sigma_mm > 0.0:
            pose = PoseSE3(q=pose.q, t=pose.t + rng.normal(0.0, kin_noise_sigma_mm, 3))
        entries.append(KinematicsEntry(timestamp=f.timestamp, pose=pose, frame_index=i))
    return RenderedSequence(frames=frames, kinematics=KinematicsTrajectory(entries=entries), spec=spec)


# --- noise injection ---

def noisy_depth(d: DepthMap, sigma: float, seed: int = 0) -> DepthMap:
    """Additive gaussian noise on valid pixels; sigma=0 returns d unchanged."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return d
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, d.data.shape)
    data = np.where(d.valid, np.maximum(d.data + noise, 1e-9), d.data)
    return DepthMap(data=data, units=d.units, valid=d.valid)


def noisy_image(img: ImageGray, sigma: float, seed: int = 0) -> ImageGray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return img
    rng = np.random.default_rng(seed)
    return ImageGray(data=np.clip(img.data + rng.normal(0.0, sigma, img.data.shape), 0.0, 1.0))


def noisy_trajectory(traj: KinematicsTrajectory, sigma_mm: float, seed: int = 0) -> KinematicsTrajectory:
    if sigma_mm < 0:
        raise ValueError("sigma must be >= 0")
    if sigma_mm == 0.0:
        return traj
    rng = np.random.default_rng(seed)
    entries = [
        KinematicsEntry(
            timestamp=e.timestamp,
            pose=PoseSE3(q=e.pose.q, t=e.pose.t + rng.normal(0.0, sigma_mm, 3)),
            frame_index=e.frame_index,
        )
        for e in traj.entries
    ]
    return KinematicsTrajectory(entries=entries)
