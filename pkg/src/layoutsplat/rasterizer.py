"""Differentiable splatting of a scene snapshot.

Forward: project every world Gaussian through the camera (EWA affine
approximation of the perspective projection), bin by 16x16 tile, composite
front to back per pixel. Backward: recompute the per-pixel traversal and chain
image-space gradients through the projection and the instance-to-world
transforms down to every raw Gaussian parameter and every layout pose
parameter.

A brute-force per-pixel oracle (no tiling, no early termination, no footprint
truncation) serves as the reference implementation the optimized path is
tested against.

Footprint radii adapt to each Gaussian's opacity so that everything truncated
contributes less than `contribution_cutoff` to any pixel; the default cutoff
reproduces the usual ~3 sigma rectangles while `RasterizerConfig.exact()`
disables truncation entirely for oracle-equivalence and gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .scene import Camera, DegenerateGaussianError, SceneSnapshot, quat_to_rotmat

_GENERATOR_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class RasterizerConfig:
    tile_size: int = 16
    dilation: float = 0.3  # px^2 added to the projected covariance diagonal
    near_plane: float = 0.01
    contribution_cutoff: float = 1.0 / 255.0  # truncate where alpha' would fall below
    early_stop_transmittance: float = 1e-4
    dtype: type = np.float64

    @classmethod
    def exact(cls, **overrides) -> "RasterizerConfig":
        """No truncation, no early stop: matches the oracle to rounding error."""
        cfg = cls(contribution_cutoff=0.0, early_stop_transmittance=0.0)
        return replace(cfg, **overrides)


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) accumulated opacity
    contributors: np.ndarray  # (H, W) int32 composited-Gaussian count


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2) dilated projected covariance
    depth: float  # camera-space z
    bounds: tuple[int, int, int, int]  # conservative (x0, y0, x1, y1) pixel rect


@dataclass
class InstanceGradients:
    positions: np.ndarray
    rotations_raw: np.ndarray
    scales_raw: np.ndarray
    opacity_raw: np.ndarray
    colors_raw: np.ndarray


@dataclass
class LayoutGradients:
    center: np.ndarray
    scale_factor: float
    yaw: float
    opacity_logit: float = 0.0


@dataclass
class RenderGradients:
    instances: dict[str, InstanceGradients] = field(default_factory=dict)
    layouts: dict[str, LayoutGradients] = field(default_factory=dict)


def _projection_jacobians(t: np.ndarray, cam: Camera) -> np.ndarray:
    """EWA Jacobian of the pinhole projection at camera-space points t, (N, 2, 3)."""
    n = t.shape[0]
    tz = t[:, 2]
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = cam.fx / tz
    j[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    j[:, 1, 1] = cam.fy / tz
    j[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    return j


def _project_arrays(
    positions: np.ndarray,
    covariances: np.ndarray,
    opacities: np.ndarray,
    cam: Camera,
    cfg: RasterizerConfig,
) -> dict:
    """Vectorized projection of world Gaussians; see project() for the contract.

    Returns arrays over all inputs plus a `visible` mask (in front of the near
    plane, footprint overlapping the viewport, peak contribution above cutoff).
    """
    n = positions.shape[0]
    t = cam.to_camera(positions)
    in_front = t[:, 2] > cfg.near_plane
    tz = np.where(in_front, t[:, 2], 1.0)  # placeholder depth avoids div warnings

    mean2d = np.stack(
        [cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1
    )
    j = _projection_jacobians(np.where(in_front[:, None], t, [0.0, 0.0, 1.0]), cam)
    u = np.einsum("nij,jk->nik", j, cam.rotation)
    cov2d = np.einsum("nij,njk,nlk->nil", u, covariances, u)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    ok_det = det > 0
    safe_det = np.where(ok_det, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    sigma_max = np.sqrt(np.maximum(lam_max, 0.0))
    if cfg.contribution_cutoff > 0:
        cut_log = np.log(np.maximum(opacities, 1e-300) / cfg.contribution_cutoff)
        radius = sigma_max * np.sqrt(2.0 * np.maximum(cut_log, 0.0))
    else:
        cut_log = np.full(n, np.inf)
        radius = np.full(n, math.hypot(cam.width, cam.height))

    x0 = np.floor(mean2d[:, 0] - radius).astype(np.int64)
    x1 = np.ceil(mean2d[:, 0] + radius).astype(np.int64)
    y0 = np.floor(mean2d[:, 1] - radius).astype(np.int64)
    y1 = np.ceil(mean2d[:, 1] + radius).astype(np.int64)
    on_screen = (x1 > 0) & (x0 < cam.width) & (y1 > 0) & (y0 < cam.height)
    positive_cut = cut_log > 0

    visible = in_front & ok_det & on_screen & positive_cut
    return {
        "visible": visible,
        "t": t,
        "mean2d": mean2d,
        "cov2d": cov2d,
        "conic": conic,
        "cut_log": cut_log,
        "depth": t[:, 2],
        "rect": (
            np.clip(x0, 0, cam.width),
            np.clip(y0, 0, cam.height),
            np.clip(x1, 0, cam.width),
            np.clip(y1, 0, cam.height),
        ),
        "j": j,
    }


def project(
    position: np.ndarray,
    covariance: np.ndarray,
    cam: Camera,
    cfg: RasterizerConfig | None = None,
    opacity: float = 1.0,
) -> ProjectedGaussian | None:
    """Project one world Gaussian; returns None when culled."""
    cfg = cfg or RasterizerConfig()
    out = _project_arrays(
        np.asarray(position, dtype=np.float64).reshape(1, 3),
        np.asarray(covariance, dtype=np.float64).reshape(1, 3, 3),
        np.array([opacity], dtype=np.float64),
        cam,
        cfg,
    )
    if not out["visible"][0]:
        return None
    x0, y0, x1, y1 = (int(r[0]) for r in out["rect"])
    return ProjectedGaussian(
        mean2d=out["mean2d"][0],
        cov2d=out["cov2d"][0],
        depth=float(out["depth"][0]),
        bounds=(x0, y0, x1, y1),
    )


def pixel_opacity(pg: ProjectedGaussian, q: np.ndarray, alpha: float) -> float:
    """Opacity contribution of a projected Gaussian at pixel coordinate q."""
    cov = np.asarray(pg.cov2d, dtype=np.float64)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0:
        raise DegenerateGaussianError("projected covariance is singular")
    d = np.asarray(q, dtype=np.float64) - pg.mean2d
    maha = (cov[1, 1] * d[0] ** 2 - 2 * cov[0, 1] * d[0] * d[1] + cov[0, 0] * d[1] ** 2) / det
    return float(alpha * math.exp(-0.5 * maha))


def _bin_pairs(proj: dict, order: np.ndarray, cam: Camera, cfg: RasterizerConfig):
    """Build pair arrays (gaussian row per overlapped tile), tile-major with
    front-to-back order inside each tile."""
    ts = cfg.tile_size
    tiles_x = (cam.width + ts - 1) // ts
    tiles_y = (cam.height + ts - 1) // ts
    x0, y0, x1, y1 = (r[order] for r in proj["rect"])
    tx0 = x0 // ts
    tx1 = (x1 - 1) // ts
    ty0 = y0 // ts
    ty1 = (y1 - 1) // ts
    nx = (tx1 - tx0 + 1).astype(np.int64)
    ny = (ty1 - ty0 + 1).astype(np.int64)
    counts = nx * ny
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    gid = np.repeat(np.arange(order.shape[0]), counts)
    within = np.arange(total) - offsets[gid]
    wx = within % nx[gid]
    wy = within // nx[gid]
    tile = (ty0[gid] + wy) * tiles_x + (tx0[gid] + wx)

    srt = np.argsort(tile, kind="stable")
    pair_g = gid[srt]
    tile_sorted = tile[srt]
    n_tiles = tiles_x * tiles_y
    tile_start = np.searchsorted(tile_sorted, np.arange(n_tiles))
    tile_end = np.searchsorted(tile_sorted, np.arange(n_tiles) + 1)
    return pair_g, tile_start, tile_end, tiles_x


def _prepare(scene: SceneSnapshot, cam: Camera, cfg: RasterizerConfig):
    proj = _project_arrays(
        scene.world_positions, scene.world_covariances, scene.opacities, cam, cfg
    )
    visible = np.nonzero(proj["visible"])[0]
    order = visible[np.argsort(proj["depth"][visible], kind="stable")]
    pair_g, tile_start, tile_end, tiles_x = _bin_pairs(proj, order, cam, cfg)
    f = cfg.dtype
    arrays = dict(
        mean2d=np.ascontiguousarray(proj["mean2d"][order], dtype=f),
        conic=np.ascontiguousarray(proj["conic"][order], dtype=f),
        opac=np.ascontiguousarray(scene.opacities[order], dtype=f),
        color=np.ascontiguousarray(scene.colors[order], dtype=f),
        cut_log=np.ascontiguousarray(proj["cut_log"][order], dtype=f),
    )
    return proj, order, (pair_g, tile_start, tile_end, tiles_x), arrays


def render_forward(
    scene: SceneSnapshot,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    cfg: RasterizerConfig | None = None,
) -> RenderedImage:
    """Tiled front-to-back compositing of the snapshot."""
    cfg = cfg or RasterizerConfig()
    f = cfg.dtype
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=f).reshape(3)
    img = np.empty((h, w, 3), dtype=f)
    transmittance = np.empty((h, w), dtype=f)
    contrib = np.zeros((h, w), dtype=np.int32)

    if scene.count == 0:
        img[:] = bg
        transmittance[:] = 1.0
        return RenderedImage(rgb=img, alpha=np.zeros((h, w), dtype=f), contributors=contrib)

    _, _, (pair_g, tile_start, tile_end, tiles_x), arr = _prepare(scene, cam, cfg)
    _kernels.forward_kernel(
        pair_g, tile_start, tile_end,
        arr["mean2d"], arr["conic"], arr["opac"], arr["color"], arr["cut_log"],
        bg, f(cfg.early_stop_transmittance),
        tiles_x, cfg.tile_size, h, w,
        img, transmittance, contrib,
    )
    return RenderedImage(rgb=img, alpha=1.0 - transmittance, contributors=contrib)


def render_naive_oracle(
    scene: SceneSnapshot,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    cfg: RasterizerConfig | None = None,
    return_partition: bool = False,
):
    """Reference renderer: every Gaussian evaluated at every pixel, full sort,
    double precision, no tiling, no truncation, no early stop.

    With return_partition=True also returns (weight_sum, transmittance) per
    pixel for compositing-identity checks.
    """
    cfg = cfg or RasterizerConfig()
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    t = cam.to_camera(scene.world_positions) if scene.count else np.zeros((0, 3))
    in_front = t[:, 2] > cfg.near_plane if scene.count else np.zeros(0, bool)
    idx = np.nonzero(in_front)[0]
    if idx.size == 0:
        img = np.tile(bg, (h, w, 1))
        out = RenderedImage(
            rgb=img, alpha=np.zeros((h, w)), contributors=np.zeros((h, w), np.int32)
        )
        if return_partition:
            return out, (np.zeros((h, w)), np.ones((h, w)))
        return out

    order = idx[np.argsort(t[idx, 2], kind="stable")]
    tv = t[order]
    proj = _project_arrays(
        scene.world_positions[order],
        scene.world_covariances[order],
        scene.opacities[order],
        cam,
        cfg,
    )
    mean2d = proj["mean2d"]
    conic = proj["conic"]
    if not np.all(proj["cov2d"][:, 0, 0] * proj["cov2d"][:, 1, 1] - proj["cov2d"][:, 0, 1] ** 2 > 0):
        raise DegenerateGaussianError("projected covariance is singular")
    opac = scene.opacities[order]
    colors = scene.colors[order]

    ys, xs = np.mgrid[0:h, 0:w]
    qx = (xs + 0.5).ravel()
    qy = (ys + 0.5).ravel()
    n_pix = h * w
    img = np.empty((n_pix, 3), dtype=np.float64)
    alpha_out = np.empty(n_pix, dtype=np.float64)
    wsum = np.empty(n_pix, dtype=np.float64)
    tfin = np.empty(n_pix, dtype=np.float64)
    contrib = np.full(n_pix, order.size, dtype=np.int32)

    chunk = max(1, int(4_000_000 // max(order.size, 1)))
    for s in range(0, n_pix, chunk):
        e = min(s + chunk, n_pix)
        dx = qx[s:e, None] - mean2d[None, :, 0]
        dy = qy[s:e, None] - mean2d[None, :, 1]
        power = 0.5 * (conic[None, :, 0] * dx**2 + conic[None, :, 2] * dy**2)
        power += conic[None, :, 1] * dx * dy
        alpha = np.minimum(opac[None, :] * np.exp(-power), _kernels.ALPHA_CEILING)
        one_m = 1.0 - alpha
        trans = np.cumprod(one_m, axis=1)
        t_before = np.concatenate([np.ones((e - s, 1)), trans[:, :-1]], axis=1)
        weights = alpha * t_before
        img[s:e] = weights @ colors + trans[:, -1:] * bg[None, :]
        tfin[s:e] = trans[:, -1]
        alpha_out[s:e] = 1.0 - trans[:, -1]
        wsum[s:e] = weights.sum(axis=1)

    out = RenderedImage(
        rgb=img.reshape(h, w, 3),
        alpha=alpha_out.reshape(h, w),
        contributors=contrib.reshape(h, w),
    )
    if return_partition:
        return out, (wsum.reshape(h, w), tfin.reshape(h, w))
    return out


def _quat_rotation_grads(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain d<L>/dR into quaternion gradients (tangent-projected), batch form.

    q: (M, 4) unit quaternions, d_rot: (M, 3, 3). Returns (M, 4).
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dr_dw = 2 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(-1, 3, 3)
    dr_dx = 2 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(-1, 3, 3)
    dr_dy = 2 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(-1, 3, 3)
    dr_dz = 2 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(-1, 3, 3)
    dq = np.stack(
        [
            np.einsum("mij,mij->m", d_rot, dr_dw),
            np.einsum("mij,mij->m", d_rot, dr_dx),
            np.einsum("mij,mij->m", d_rot, dr_dy),
            np.einsum("mij,mij->m", d_rot, dr_dz),
        ],
        axis=1,
    )
    # Forward normalizes quaternions, so project out the radial component.
    return dq - q * np.einsum("mi,mi->m", dq, q)[:, None]


def render_backward(
    scene: SceneSnapshot,
    cam: Camera,
    residual: np.ndarray,
    cfg: RasterizerConfig | None = None,
) -> RenderGradients:
    """Gradients of <residual, rendered image> for every Gaussian and layout
    parameter, recomputing the forward traversal (no stored per-pixel lists)."""
    cfg = cfg or RasterizerConfig()
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (cam.height, cam.width, 3):
        raise ValueError(
            f"residual shape {residual.shape} does not match render "
            f"{(cam.height, cam.width, 3)}"
        )

    grads = RenderGradients()
    for layout, gauss in scene.instances:
        m = gauss.count
        grads.instances[layout.id] = InstanceGradients(
            positions=np.zeros((m, 3)),
            rotations_raw=np.zeros((m, 4)),
            scales_raw=np.zeros((m, 3)),
            opacity_raw=np.zeros(m),
            colors_raw=np.zeros((m, 3)),
        )
        grads.layouts[layout.id] = LayoutGradients(
            center=np.zeros(3), scale_factor=0.0, yaw=0.0
        )
    if scene.count == 0:
        return grads

    proj, order, (pair_g, tile_start, tile_end, tiles_x), arr = _prepare(scene, cam, cfg)
    f = cfg.dtype
    h, w = cam.height, cam.width

    # Forward replay to obtain the composited totals the backward scan needs.
    img = np.empty((h, w, 3), dtype=f)
    transmittance = np.empty((h, w), dtype=f)
    contrib = np.zeros((h, w), dtype=np.int32)
    bg = np.zeros(3, dtype=f)
    _kernels.forward_kernel(
        pair_g, tile_start, tile_end,
        arr["mean2d"], arr["conic"], arr["opac"], arr["color"], arr["cut_log"],
        bg, f(cfg.early_stop_transmittance),
        tiles_x, cfg.tile_size, h, w,
        img, transmittance, contrib,
    )
    pair_grad = np.zeros((pair_g.shape[0], 9), dtype=f)
    _kernels.backward_kernel(
        pair_g, tile_start, tile_end,
        arr["mean2d"], arr["conic"], arr["opac"], arr["color"], arr["cut_log"],
        f(cfg.early_stop_transmittance),
        tiles_x, cfg.tile_size, h, w,
        np.ascontiguousarray(residual, dtype=f), img, pair_grad,
    )

    nv = order.shape[0]
    pg = pair_grad.astype(np.float64)
    per = np.stack(
        [np.bincount(pair_g, weights=pg[:, col], minlength=nv) for col in range(9)],
        axis=1,
    )
    d_mean2d = per[:, 0:2]
    d_conic = per[:, 2:5]
    d_opac_act = per[:, 5]
    d_color_act = per[:, 6:9]

    # Conic -> dilated 2D covariance entries (a, b, c).
    cov2d = proj["cov2d"][order]
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    det2 = det * det
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    da = (-c * c * ga + b * c * gb - b * b * gc) / det2
    db = (2 * b * c * ga - (det + 2 * b * b) * gb + 2 * a * b * gc) / det2
    dc = (-b * b * ga + a * b * gb - a * a * gc) / det2
    g2 = np.empty((nv, 2, 2))
    g2[:, 0, 0] = da
    g2[:, 0, 1] = 0.5 * db
    g2[:, 1, 0] = 0.5 * db
    g2[:, 1, 1] = dc

    t = proj["t"][order]
    jmat = proj["j"][order]
    u = np.einsum("nij,jk->nik", jmat, cam.rotation)
    d_sigma_w = np.einsum("nji,njk,nkl->nil", u, g2, u)

    # Position gradient: through the projected mean and through J's dependence
    # on the camera-space position.
    cov_cam = np.einsum("ij,njk,lk->nil", cam.rotation, scene.world_covariances[order], cam.rotation)
    d_j = 2.0 * np.einsum("nij,njk,nkl->nil", g2, jmat, cov_cam)
    tz = t[:, 2]
    dt = np.zeros((nv, 3))
    dt[:, 0] = d_mean2d[:, 0] * cam.fx / tz - d_j[:, 0, 2] * cam.fx / tz**2
    dt[:, 1] = d_mean2d[:, 1] * cam.fy / tz - d_j[:, 1, 2] * cam.fy / tz**2
    dt[:, 2] = (
        -d_mean2d[:, 0] * cam.fx * t[:, 0] / tz**2
        - d_mean2d[:, 1] * cam.fy * t[:, 1] / tz**2
        - d_j[:, 0, 0] * cam.fx / tz**2
        + d_j[:, 0, 2] * 2.0 * cam.fx * t[:, 0] / tz**3
        - d_j[:, 1, 1] * cam.fy / tz**2
        + d_j[:, 1, 2] * 2.0 * cam.fy * t[:, 1] / tz**3
    )
    d_mu_w = dt @ cam.rotation

    # Scatter per-visible-Gaussian gradients back to snapshot indexing.
    full_mu = np.zeros((scene.count, 3))
    full_sigma = np.zeros((scene.count, 3, 3))
    full_opac = np.zeros(scene.count)
    full_color = np.zeros((scene.count, 3))
    full_mu[order] = d_mu_w
    full_sigma[order] = d_sigma_w
    full_opac[order] = d_opac_act
    full_color[order] = d_color_act

    for layout, gauss in scene.instances:
        sl = scene.instance_slice(layout.id)
        dmu = full_mu[sl]
        dsig = full_sigma[sl]
        ig = grads.instances[layout.id]
        lg = grads.layouts[layout.id]

        k = layout.scale_factor
        rz = layout.rotation()
        mu_w = scene.world_positions[sl]
        sigma_w = scene.world_covariances[sl]
        rel = mu_w - layout.center

        ig.positions += k * (dmu @ rz)
        lg.center += dmu.sum(axis=0)
        lg.scale_factor += float(
            np.einsum("mi,mi->", dmu, rel) / k
            + 2.0 / k * np.einsum("mij,mij->", dsig, sigma_w)
        )
        z_rel = rel @ _GENERATOR_Z.T
        commut = np.einsum("ij,mjk->mik", _GENERATOR_Z, sigma_w) - np.einsum(
            "mij,jk->mik", sigma_w, _GENERATOR_Z
        )
        lg.yaw += float(np.einsum("mi,mi->", dmu, z_rel) + np.einsum("mij,mij->", dsig, commut))

        d_sigma_obj = k * k * np.einsum("ji,mjk,kl->mil", rz, dsig, rz)
        quats = gauss.rotations
        norms = np.linalg.norm(quats, axis=1, keepdims=True)
        qn = quats / np.maximum(norms, 1e-12)
        rot = quat_to_rotmat(qn)
        s2 = gauss.scales**2
        nmat = np.einsum("mji,mjk,mkl->mil", rot, d_sigma_obj, rot)
        ig.scales_raw += 2.0 * s2 * np.einsum("mii->mi", nmat)
        d_rot = 2.0 * np.einsum("mij,mjk,mk->mik", d_sigma_obj, rot, s2)
        ig.rotations_raw += _quat_rotation_grads(qn, d_rot) / np.maximum(norms, 1e-12)

        # Activation chains. Snapshot opacity includes the optional layout
        # multiplier: alpha_act = sigmoid(raw) * mult.
        mult = layout.opacity_multiplier()
        alpha_g = gauss.opacities
        dact = full_opac[sl]
        ig.opacity_raw += dact * mult * alpha_g * (1.0 - alpha_g)
        if layout.opacity_logit is not None:
            lg.opacity_logit += float(np.sum(dact * alpha_g) * mult * (1.0 - mult))
        col = gauss.colors
        ig.colors_raw += full_color[sl] * col * (1.0 - col)

    return grads
