"""Layout-guided Gaussian scene representation.

An instance is a box-shaped layout (center, extents, uniform scale, yaw about
world z) holding a fixed set of anisotropic Gaussians expressed in the layout's
local frame. Composing an instance into the world applies the similarity
transform

    p_world   = k * R_z(yaw) * p_local + center
    Sigma_w   = k^2 * R_z(yaw) * Sigma_local * R_z(yaw)^T

Raw Gaussian parameters are unconstrained; activations (exp for scales,
logistic for opacity and color) keep the physical values in range no matter
what a gradient step does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class EmptySceneError(ValueError):
    """Raised when a scene snapshot is requested for zero instances."""


class DegenerateGaussianError(ValueError):
    """Raised when a covariance that must be invertible is singular."""


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle in radians into [0, 2*pi)."""
    wrapped = math.fmod(float(yaw), TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return 0.0 if wrapped == TWO_PI else wrapped


def rot_z(yaw: float) -> np.ndarray:
    """Rotation matrix about the world z axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_deriv(yaw: float) -> np.ndarray:
    """d/dyaw of rot_z(yaw)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix/matrices.

    Accepts shape (4,) or (M, 4); returns (3, 3) or (M, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot[0] if single else rot


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class LearnableFlags:
    """Which layout pose parameters the refinement stage may update."""

    center: bool = False
    scale: bool = False
    yaw: bool = False


@dataclass
class InstanceLayout:
    """One oriented layout box: id, prompt, pose, and extent.

    extents = (h, w, l) are the full box dimensions along the layout's own
    (x, y, z) axes before the uniform scale factor is applied; yaw rotates the
    box about world z.
    """

    id: str
    prompt: str
    center: np.ndarray
    extents: np.ndarray
    scale_factor: float = 1.0
    yaw: float = 0.0
    learnable: LearnableFlags = field(default_factory=LearnableFlags)
    opacity_logit: float | None = None  # optional global opacity multiplier, logit-space

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        self.scale_factor = float(self.scale_factor)
        if not np.all(np.isfinite(self.center)):
            raise ValueError(f"layout {self.id!r}: center must be finite")
        if not np.all(self.extents > 0):
            raise ValueError(f"layout {self.id!r}: extents must be strictly positive")
        if not self.scale_factor > 0:
            raise ValueError(f"layout {self.id!r}: scale_factor must be > 0")
        self.yaw = normalize_yaw(self.yaw)

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * self.extents

    def rotation(self) -> np.ndarray:
        return rot_z(self.yaw)

    def opacity_multiplier(self) -> float:
        if self.opacity_logit is None:
            return 1.0
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))

    def world_corners(self) -> np.ndarray:
        """The 8 box corners in world coordinates, shape (8, 3)."""
        h = self.half_extents
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return compose_position(signs * h, self)

    def copy(self) -> "InstanceLayout":
        return InstanceLayout(
            id=self.id,
            prompt=self.prompt,
            center=self.center.copy(),
            extents=self.extents.copy(),
            scale_factor=self.scale_factor,
            yaw=self.yaw,
            learnable=LearnableFlags(
                self.learnable.center, self.learnable.scale, self.learnable.yaw
            ),
            opacity_logit=self.opacity_logit,
        )


QUAT_NORM_TOL = 1e-4


@dataclass
class InstanceGaussians:
    """Gaussian parameter arrays for one instance, in the layout-local frame.

    Raw arrays are what the optimizer updates; activated values are derived:
    scales = exp(scales_raw), opacity = logistic(opacity_raw),
    colors = logistic(colors_raw). The count M is fixed after initialization.
    """

    positions: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 4) unit quaternions (w, x, y, z)
    scales_raw: np.ndarray  # (M, 3)
    opacity_raw: np.ndarray  # (M,)
    colors_raw: np.ndarray  # (M, 3)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales_raw = np.asarray(self.scales_raw, dtype=np.float64)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(-1)
        self.colors_raw = np.asarray(self.colors_raw, dtype=np.float64)
        m = self.positions.shape[0]
        if self.positions.shape != (m, 3):
            raise ValueError("positions must have shape (M, 3)")
        if self.rotations.shape != (m, 4):
            raise ValueError("rotations must have shape (M, 4)")
        if self.scales_raw.shape != (m, 3):
            raise ValueError("scales_raw must have shape (M, 3)")
        if self.opacity_raw.shape != (m,):
            raise ValueError("opacity_raw must have shape (M,)")
        if self.colors_raw.shape != (m, 3):
            raise ValueError("colors_raw must have shape (M, 3)")
        norms = np.linalg.norm(self.rotations, axis=1)
        if m and np.max(np.abs(norms - 1.0)) > QUAT_NORM_TOL:
            raise ValueError(
                f"rotation quaternions must be unit-norm within {QUAT_NORM_TOL}"
            )

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.scales_raw)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.colors_raw)

    def covariances(self) -> np.ndarray:
        """Local covariances R diag(s^2) R^T, shape (M, 3, 3).

        Quaternions are normalized here, so slightly off-unit storage (within
        the construction tolerance) still yields pure rotations.
        """
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        rot = quat_to_rotmat(self.rotations / np.maximum(norms, 1e-12))
        s2 = self.scales**2
        return np.einsum("mij,mj,mkj->mik", rot, s2, rot)

    def renormalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= np.maximum(norms, 1e-12)

    def copy(self) -> "InstanceGaussians":
        return InstanceGaussians(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            scales_raw=self.scales_raw.copy(),
            opacity_raw=self.opacity_raw.copy(),
            colors_raw=self.colors_raw.copy(),
        )


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Camera frame: x right, y down, z forward. A world point maps to
    t = rotation @ p + translation, then to pixels (fx*tx/tz + cx, fy*ty/tz + cy).
    Pixel (i, j) covers the unit square centered on (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"world_to_camera rotation not orthonormal (err={err:.2e})")

    @property
    def eye(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    fov_y_deg: float = 60.0,
    up: np.ndarray = np.array([0.0, 0.0, 1.0]),
) -> Camera:
    """Camera at `eye` looking at `target`, world +z up by default."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise ValueError("look_at_camera: eye and target coincide")
    z_axis = fwd / dist
    x_axis = np.cross(z_axis, up)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-9:  # looking straight along up: fall back to world x
        x_axis = np.array([1.0, 0.0, 0.0])
        nx = 1.0
    x_axis = x_axis / nx
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis])
    fy = 0.5 * height / math.tan(math.radians(fov_y_deg) * 0.5)
    return Camera(
        fx=fy,
        fy=fy,
        cx=0.5 * width,
        cy=0.5 * height,
        width=width,
        height=height,
        rotation=rot,
        translation=-rot @ eye,
    )


def compose_position(p: np.ndarray, layout: InstanceLayout) -> np.ndarray:
    """Local position(s) to world: k * R_z(yaw) * p + center."""
    p = np.asarray(p, dtype=np.float64)
    rot = layout.rotation()
    return layout.scale_factor * (p @ rot.T) + layout.center


def decompose_position(p_world: np.ndarray, layout: InstanceLayout) -> np.ndarray:
    """Inverse of compose_position."""
    p_world = np.asarray(p_world, dtype=np.float64)
    rot = layout.rotation()
    return ((p_world - layout.center) @ rot) / layout.scale_factor


def compose_covariance(cov: np.ndarray, layout: InstanceLayout) -> np.ndarray:
    """Local covariance(s) to world: k^2 * R_z * cov * R_z^T."""
    cov = np.asarray(cov, dtype=np.float64)
    rot = layout.rotation()
    k2 = layout.scale_factor**2
    if cov.ndim == 2:
        return k2 * rot @ cov @ rot.T
    return k2 * np.einsum("ij,mjk,lk->mil", rot, cov, rot)


def compose_position_jacobians(p: np.ndarray, layout: InstanceLayout) -> dict:
    """Analytic Jacobians of compose_position for one local point.

    Returns d(world)/d(p) (3,3), .../d(center) (3,3), .../d(scale_factor) (3,),
    .../d(yaw) (3,).
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    rot = layout.rotation()
    drot = rot_z_deriv(layout.yaw)
    return {
        "p": layout.scale_factor * rot,
        "center": np.eye(3),
        "scale_factor": rot @ p,
        "yaw": layout.scale_factor * (drot @ p),
    }


def build_covariance(rotation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Covariance R diag(s^2) R^T from a unit quaternion and positive scales."""
    rotation = np.asarray(rotation, dtype=np.float64).reshape(4)
    scales = np.asarray(scales, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(rotation)
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise ValueError(f"quaternion norm {norm:.6f} deviates from 1 beyond {QUAT_NORM_TOL}")
    if not np.all(scales > 0):
        raise ValueError("scales must be strictly positive")
    rot = quat_to_rotmat(rotation / norm)
    return rot @ np.diag(scales**2) @ rot.T


@dataclass(frozen=True)
class SceneSnapshot:
    """Immutable flattened world-frame Gaussian set with instance back-references.

    Safe to share across threads: all arrays are copies marked read-only, and
    the per-instance back-references are deep copies taken at assembly time.
    """

    world_positions: np.ndarray  # (SumM, 3)
    world_covariances: np.ndarray  # (SumM, 3, 3)
    opacities: np.ndarray  # (SumM,) activated, incl. layout opacity multiplier
    colors: np.ndarray  # (SumM, 3) activated
    owner_index: np.ndarray  # (SumM,) int index into instance_ids
    instance_ids: tuple[str, ...]
    instances: tuple[tuple[InstanceLayout, InstanceGaussians], ...]
    slices: tuple[tuple[int, int], ...]  # per-instance [start, stop) into the flat arrays

    @property
    def count(self) -> int:
        return self.world_positions.shape[0]

    @property
    def owner(self) -> list[str]:
        return [self.instance_ids[i] for i in self.owner_index]

    def instance_slice(self, instance_id: str) -> slice:
        idx = self.instance_ids.index(instance_id)
        start, stop = self.slices[idx]
        return slice(start, stop)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def assemble_scene(
    instances: list[tuple[InstanceLayout, InstanceGaussians]],
) -> SceneSnapshot:
    """Flatten per-instance Gaussians into one world-frame snapshot."""
    if not instances:
        raise EmptySceneError("cannot assemble a scene with no instances")
    ids = [layout.id for layout, _ in instances]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate instance ids in scene")

    positions, covariances, opacities, colors, owners, slices = [], [], [], [], [], []
    start = 0
    for idx, (layout, gauss) in enumerate(instances):
        m = gauss.count
        positions.append(compose_position(gauss.positions, layout))
        covariances.append(compose_covariance(gauss.covariances(), layout))
        opacities.append(gauss.opacities * layout.opacity_multiplier())
        colors.append(gauss.colors)
        owners.append(np.full(m, idx, dtype=np.int64))
        slices.append((start, start + m))
        start += m

    frozen_instances = tuple((layout.copy(), gauss.copy()) for layout, gauss in instances)
    return SceneSnapshot(
        world_positions=_freeze(np.concatenate(positions)),
        world_covariances=_freeze(np.concatenate(covariances)),
        opacities=_freeze(np.concatenate(opacities)),
        colors=_freeze(np.concatenate(colors)),
        owner_index=_freeze(np.concatenate(owners)),
        instance_ids=tuple(ids),
        instances=frozen_instances,
        slices=tuple(slices),
    )
