"""Pluggable guidance providers and the camera sampling policy.

A provider maps (rendered view, camera, prompt, optional layout-condition
image, timestep) to an image-space residual plus a timestep weight. The
gradient a provider induces on scene parameters is w(eta) * <residual, dI/d.>,
i.e. the residual plays the role a denoiser's noise-prediction error would;
real diffusion backends would plug in behind the same contract.

Also here: the deterministic orbit cameras used for instance-level and
scene-level views, and the box-silhouette condition renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import Camera, InstanceLayout, look_at_camera

INSTANCE_GUIDANCE_SCALE = 50.0
SCENE_GUIDANCE_SCALE = 100.0

TIMESTEP_START = 0.98
TIMESTEP_END = 0.02

# Distinct fill colors for the layout condition image, indexed by instance
# position in the scene.
CONDITION_PALETTE = np.array(
    [
        [0.894, 0.102, 0.110],
        [0.216, 0.494, 0.722],
        [0.302, 0.686, 0.290],
        [0.596, 0.306, 0.639],
        [1.000, 0.498, 0.000],
        [1.000, 1.000, 0.200],
        [0.651, 0.337, 0.157],
        [0.969, 0.506, 0.749],
        [0.600, 0.600, 0.600],
        [0.090, 0.745, 0.812],
    ]
)


class MissingGuidanceAssetError(KeyError):
    """A provider lacks a required asset (e.g. no target image for a camera)."""


@dataclass
class CameraConfig:
    width: int = 128
    height: int = 128
    fov_y_deg: float = 60.0
    elevation_deg: float = 15.0


@dataclass
class GuidanceRequest:
    image: np.ndarray  # (H, W, 3) rendered view
    camera: Camera
    prompt: str
    timestep: float
    condition: np.ndarray | None = None  # (H, W, 3) layout render
    camera_key: str | None = None  # identifies the sampled view for keyed assets

    def __post_init__(self) -> None:
        if not (0.0 <= self.timestep <= 1.0):
            raise ValueError("timestep must lie in [0, 1]")
        if self.condition is not None and self.condition.shape != self.image.shape:
            raise ValueError("condition shape must match image shape")


@dataclass
class GuidanceResidual:
    residual: np.ndarray  # (H, W, 3)
    weight: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.residual)):
            raise ValueError("residual must be finite")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass
class GuidanceConfig:
    provider: str = "flat_color"
    params: dict = field(default_factory=dict)
    guidance_scale: float = 1.0
    w_schedule: str = "constant"  # or "quadratic": w(eta) = eta^2
    timestep_start: float = TIMESTEP_START
    timestep_end: float = TIMESTEP_END

    def __post_init__(self) -> None:
        if not self.guidance_scale > 0:
            raise ValueError("guidance_scale must be > 0")
        if self.w_schedule not in ("constant", "quadratic"):
            raise ValueError(f"unknown w_schedule {self.w_schedule!r}")

    @classmethod
    def instance_default(cls, provider="flat_color", **params) -> "GuidanceConfig":
        return cls(provider=provider, params=params, guidance_scale=INSTANCE_GUIDANCE_SCALE)

    @classmethod
    def scene_default(cls, provider="checker", **params) -> "GuidanceConfig":
        return cls(provider=provider, params=params, guidance_scale=SCENE_GUIDANCE_SCALE)


def timestep_weight(eta: float, cfg: GuidanceConfig) -> float:
    return eta * eta if cfg.w_schedule == "quadratic" else 1.0


def timestep_at(step: int, total_steps: int, start=TIMESTEP_START, end=TIMESTEP_END) -> float:
    """Linearly decayed timestep; both optimization levels share it."""
    if total_steps <= 1:
        return start
    eta = start - (start - end) * step / (total_steps - 1)
    lo, hi = min(start, end), max(start, end)
    return min(max(eta, lo), hi)


class PhotometricTargetProvider:
    """Residual against per-view target images keyed by camera key."""

    def __init__(self, targets: dict[str, np.ndarray], cfg: GuidanceConfig):
        self.targets = {k: np.asarray(v, dtype=np.float64) for k, v in targets.items()}
        self.cfg = cfg

    def has_assets_for(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.targets)

    def provide(self, req: GuidanceRequest) -> GuidanceResidual:
        if req.camera_key is None or req.camera_key not in self.targets:
            raise MissingGuidanceAssetError(
                f"no photometric target for camera {req.camera_key!r}"
            )
        target = self.targets[req.camera_key]
        if target.shape != req.image.shape:
            raise ValueError("target image shape mismatch")
        residual = self.cfg.guidance_scale * (req.image - target)
        return GuidanceResidual(residual=residual, weight=timestep_weight(req.timestep, self.cfg))


class FlatColorProvider:
    """Residual toward a constant color."""

    def __init__(self, cfg: GuidanceConfig):
        self.color = np.asarray(cfg.params.get("color", (0.5, 0.5, 0.5)), dtype=np.float64)
        self.cfg = cfg

    def provide(self, req: GuidanceRequest) -> GuidanceResidual:
        residual = self.cfg.guidance_scale * (req.image - self.color)
        return GuidanceResidual(residual=residual, weight=timestep_weight(req.timestep, self.cfg))


class CheckerTextureProvider:
    """Residual toward a procedural checkerboard, phase-shifted per camera."""

    def __init__(self, cfg: GuidanceConfig):
        self.cells = int(cfg.params.get("cells", 8))
        self.colors = (
            np.asarray(cfg.params.get("color_a", (0.9, 0.9, 0.9)), dtype=np.float64),
            np.asarray(cfg.params.get("color_b", (0.1, 0.1, 0.1)), dtype=np.float64),
        )
        self.cfg = cfg

    def pattern(self, height: int, width: int, camera_key: str | None) -> np.ndarray:
        phase = 0 if camera_key is None else sum(camera_key.encode()) % 2
        cell_h = max(1, height // self.cells)
        cell_w = max(1, width // self.cells)
        ys, xs = np.mgrid[0:height, 0:width]
        parity = ((ys // cell_h + xs // cell_w + phase) % 2).astype(bool)
        img = np.where(parity[..., None], self.colors[1], self.colors[0])
        return img

    def provide(self, req: GuidanceRequest) -> GuidanceResidual:
        h, w = req.image.shape[:2]
        target = self.pattern(h, w, req.camera_key)
        residual = self.cfg.guidance_scale * (req.image - target)
        return GuidanceResidual(residual=residual, weight=timestep_weight(req.timestep, self.cfg))


_PROVIDERS = {
    "photometric": PhotometricTargetProvider,
    "flat_color": FlatColorProvider,
    "checker": CheckerTextureProvider,
}


def build_provider(cfg: GuidanceConfig, targets: dict[str, np.ndarray] | None = None):
    if cfg.provider == "photometric":
        if targets is None:
            targets = cfg.params.get("targets")
        if targets is None:
            raise MissingGuidanceAssetError("photometric provider needs target images")
        return PhotometricTargetProvider(targets, cfg)
    if cfg.provider not in _PROVIDERS:
        raise ValueError(f"unknown guidance provider {cfg.provider!r}")
    return _PROVIDERS[cfg.provider](cfg)


def provide(req: GuidanceRequest, cfg: GuidanceConfig) -> GuidanceResidual:
    """One-shot provider dispatch for the declarative config form."""
    return build_provider(cfg).provide(req)


# --------------------------------------------------------------------------
# Camera sampling policy
# --------------------------------------------------------------------------


def _orbit_eye(target: np.ndarray, radius: float, azimuth: float, elevation_deg: float) -> np.ndarray:
    el = math.radians(elevation_deg)
    return target + radius * np.array(
        [math.cos(azimuth) * math.cos(el), math.sin(azimuth) * math.cos(el), math.sin(el)]
    )


def instance_camera_radius(layout: InstanceLayout) -> float:
    return 0.75 * float(np.linalg.norm(layout.extents))


def sample_instance_camera(
    layout: InstanceLayout,
    azimuth_index: int,
    n_azimuths: int,
    cam_cfg: CameraConfig | None = None,
) -> Camera:
    """Orbit camera on the instance ring: radius 3/4 |extents|, uniform azimuths."""
    if n_azimuths < 1:
        raise ValueError("n_azimuths must be >= 1")
    cam_cfg = cam_cfg or CameraConfig()
    azimuth = 2.0 * math.pi * (azimuth_index % n_azimuths) / n_azimuths
    eye = _orbit_eye(layout.center, instance_camera_radius(layout), azimuth, cam_cfg.elevation_deg)
    return look_at_camera(
        eye, layout.center, cam_cfg.width, cam_cfg.height, cam_cfg.fov_y_deg
    )


def scene_bounds(layouts: list[InstanceLayout]) -> tuple[np.ndarray, float]:
    """Bounding sphere of all world-frame layout boxes: centered on the corner
    AABB midpoint, radius to the farthest corner."""
    if not layouts:
        raise ValueError("scene_bounds needs at least one layout")
    corners = np.concatenate([lay.world_corners() for lay in layouts])
    center = 0.5 * (corners.min(axis=0) + corners.max(axis=0))
    radius = float(np.linalg.norm(corners - center, axis=1).max())
    if radius <= 0:
        raise ValueError("degenerate scene: zero extent")
    return center, radius


def sample_scene_camera(
    layouts: list[InstanceLayout],
    azimuth_index: int,
    n_azimuths: int,
    cam_cfg: CameraConfig | None = None,
) -> Camera:
    """Orbit camera on the scene ring: radius = scene bounding-sphere radius."""
    if n_azimuths < 1:
        raise ValueError("n_azimuths must be >= 1")
    cam_cfg = cam_cfg or CameraConfig()
    center, radius = scene_bounds(layouts)
    azimuth = 2.0 * math.pi * (azimuth_index % n_azimuths) / n_azimuths
    eye = _orbit_eye(center, radius, azimuth, cam_cfg.elevation_deg)
    return look_at_camera(eye, center, cam_cfg.width, cam_cfg.height, cam_cfg.fov_y_deg)


# --------------------------------------------------------------------------
# Layout condition rendering
# --------------------------------------------------------------------------


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of a small 2D point set, counter-clockwise."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(iterable):
        out: list[np.ndarray] = []
        for p in iterable:
            while len(out) >= 2 and cross2(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_convex(mask_target: np.ndarray, hull: np.ndarray) -> None:
    """Set mask pixels whose centers fall inside the CCW hull."""
    h, w = mask_target.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((h, w), dtype=bool)
    n = len(hull)
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    mask_target |= inside


def render_layout_condition(
    layouts: list[InstanceLayout], cam: Camera, near_plane: float = 0.01
) -> np.ndarray:
    """Rasterize layout boxes as filled silhouettes with indexed colors,
    painter-ordered far to near by center depth."""
    img = np.zeros((cam.height, cam.width, 3))
    if not layouts:
        return img

    depths = [cam.to_camera(lay.center[None, :])[0, 2] for lay in layouts]
    order = sorted(range(len(layouts)), key=lambda i: -depths[i])
    for i in order:
        lay = layouts[i]
        corners_cam = cam.to_camera(lay.world_corners())
        valid = corners_cam[:, 2] > near_plane
        if valid.sum() < 3:
            continue
        cc = corners_cam[valid]
        uv = np.stack(
            [cam.fx * cc[:, 0] / cc[:, 2] + cam.cx, cam.fy * cc[:, 1] / cc[:, 2] + cam.cy],
            axis=1,
        )
        hull = _convex_hull_2d(uv)
        if len(hull) < 3:
            continue
        mask = np.zeros((cam.height, cam.width), dtype=bool)
        _fill_convex(mask, hull)
        img[mask] = CONDITION_PALETTE[i % len(CONDITION_PALETTE)]
    return img
