"""Compositional optimization loop.

Each step runs, in order: per-instance guidance (each instance rendered alone
from its orbit cameras), scene-level guidance (full snapshot rendered with the
layout-condition image, one backward pass routed to Gaussians and to learnable
layout poses), then the analytic layout-containment and flatness gradients.
Updates use per-group Adam with the 3DGS-convention moments. Instance-level
and scene-level guidance share the same timestep within a step.

Gradient routing is strict: a loss term whose weight is zero never touches its
parameters (not even with a zero-valued Adam update), which is what makes
term-isolation and local re-optimization freeze guarantees exact.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    SurfaceSamplingConfig,
    flatness_regularizer,
    flatness_regularizer_grads,
    init_instance,
)
from .guidance import (
    CameraConfig,
    GuidanceRequest,
    render_layout_condition,
    sample_instance_camera,
    sample_scene_camera,
    timestep_at,
)
from .losses import (
    DivergedOptimizationError,
    LossReport,
    LossWeights,
    layout_loss,
    layout_loss_grad_positions,
)
from .rasterizer import RasterizerConfig, render_backward, render_forward
from .scene import (
    InstanceGaussians,
    InstanceLayout,
    SceneSnapshot,
    assemble_scene,
    normalize_yaw,
)

SCALE_FACTOR_RANGE = (0.1, 10.0)
OPACITY_RAW_MAX = 9.2102  # keeps activated opacity <= 0.9999


class UnknownInstanceError(KeyError):
    pass


@dataclass
class LearningRates:
    position: float = 1.6e-4
    opacity: float = 5e-2
    color: float = 5e-3
    scale: float = 5e-3
    rotation: float = 1e-3
    layout_center: float = 5e-3
    layout_scale: float = 5e-3
    layout_yaw: float = 5e-3
    layout_opacity: float = 5e-2

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if not float(value) >= 0:
                raise ValueError(f"learning rate {name} must be >= 0")


@dataclass
class OptimizerConfig:
    steps: int = 400
    learning_rates: LearningRates = field(default_factory=LearningRates)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    instance_cameras: int = 4
    scene_cameras: int = 4
    n_views: int = 8
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    raster: RasterizerConfig = field(default_factory=RasterizerConfig)
    background: tuple = (0.0, 0.0, 0.0)
    timestep_start: float = 0.98
    timestep_end: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule_steps: int | None = None  # timestep-schedule horizon; None = this run's span


@dataclass
class GuidanceSet:
    """Providers for the two optimization levels; None disables a phase."""

    instance_provider: object | None = None
    scene_provider: object | None = None


def derive_instance_seed(seed: int, instance_id: str) -> list[int]:
    """Stable per-instance Philox key, independent of instance ordering."""
    digest = hashlib.sha256(instance_id.encode()).digest()
    return [int(seed) & (2**64 - 1), int.from_bytes(digest[:8], "little")]


@dataclass
class SceneState:
    """Mutable optimization state: layouts, Gaussians, Adam moments."""

    layouts: list[InstanceLayout]
    gaussians: dict[str, InstanceGaussians]
    scene_prompt: str = ""
    seed: int = 0
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    adam_steps: dict[str, int] = field(default_factory=dict)

    @classmethod
    def initialize(
        cls,
        layouts: list[InstanceLayout],
        sampling: SurfaceSamplingConfig,
        seed: int = 0,
        scene_prompt: str = "",
    ) -> "SceneState":
        gaussians = {
            lay.id: init_instance(lay, sampling, derive_instance_seed(seed, lay.id))
            for lay in layouts
        }
        return cls(layouts=list(layouts), gaussians=gaussians, seed=seed,
                   scene_prompt=scene_prompt)

    def ids(self) -> list[str]:
        return [lay.id for lay in self.layouts]

    def layout(self, instance_id: str) -> InstanceLayout:
        for lay in self.layouts:
            if lay.id == instance_id:
                return lay
        raise UnknownInstanceError(instance_id)

    def snapshot(self) -> SceneSnapshot:
        return assemble_scene([(lay, self.gaussians[lay.id]) for lay in self.layouts])

    def instance_snapshot(self, instance_id: str) -> SceneSnapshot:
        lay = self.layout(instance_id)
        return assemble_scene([(lay, self.gaussians[instance_id])])

    def add_instance(self, layout: InstanceLayout, sampling: SurfaceSamplingConfig) -> None:
        if layout.id in self.gaussians:
            raise ValueError(f"instance {layout.id!r} already exists")
        self.layouts.append(layout)
        self.gaussians[layout.id] = init_instance(
            layout, sampling, derive_instance_seed(self.seed, layout.id)
        )

    def remove_instance(self, instance_id: str) -> None:
        lay = self.layout(instance_id)
        self.layouts.remove(lay)
        del self.gaussians[instance_id]
        for key in [k for k in self.moments if k.startswith(instance_id + "/")]:
            del self.moments[key]
            self.adam_steps.pop(key, None)

    def copy(self) -> "SceneState":
        return SceneState(
            layouts=[lay.copy() for lay in self.layouts],
            gaussians={k: g.copy() for k, g in self.gaussians.items()},
            scene_prompt=self.scene_prompt,
            seed=self.seed,
            step=self.step,
            moments={k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            adam_steps=dict(self.adam_steps),
        )


@dataclass
class StepRecord:
    step: int
    eta: float
    report: LossReport
    layout_poses: dict[str, dict]
    wall_time: float


@dataclass
class OptimizationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


class _GradAccumulator:
    """Weighted gradient accumulation; zero-weight terms never touch a key."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def add(self, key: str, value, weight: float = 1.0) -> None:
        if weight == 0.0:
            return
        arr = np.asarray(value, dtype=np.float64) * weight
        if key in self.grads:
            self.grads[key] = self.grads[key] + arr
        else:
            self.grads[key] = arr

    def check_finite(self) -> None:
        for key, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergedOptimizationError(f"non-finite gradient for {key}")


def _adam_apply(state: SceneState, key: str, value: np.ndarray, grad: np.ndarray,
                lr: float, cfg: OptimizerConfig) -> np.ndarray:
    if lr == 0.0:
        return value
    m, v = state.moments.get(key, (np.zeros_like(value), np.zeros_like(value)))
    t = state.adam_steps.get(key, 0) + 1
    m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * grad * grad
    state.moments[key] = (m, v)
    state.adam_steps[key] = t
    m_hat = m / (1 - cfg.adam_beta1**t)
    v_hat = v / (1 - cfg.adam_beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _surrogate_value(residual: np.ndarray, weight: float) -> float:
    return float(0.5 * weight * np.mean(residual**2))


def step(
    state: SceneState,
    cfg: OptimizerConfig,
    guidance: GuidanceSet,
    step_index: int | None = None,
    total_steps: int | None = None,
    active_ids: set[str] | None = None,
) -> LossReport:
    """One optimization step; returns the per-term loss report.

    active_ids restricts parameter updates (not rendering) to those instances.
    """
    s = state.step if step_index is None else step_index
    horizon = total_steps if total_steps is not None else max(cfg.steps, s + 1)
    eta = timestep_at(s, horizon, cfg.timestep_start, cfg.timestep_end)
    w_loss = cfg.loss_weights
    active = set(state.ids()) if active_ids is None else set(active_ids)

    acc = _GradAccumulator()
    report = LossReport(weights=w_loss)

    # (a) instance-level guidance
    if guidance.instance_provider is not None and w_loss.beta1 > 0:
        for lay in state.layouts:
            gauss = state.gaussians[lay.id]
            snap_i = assemble_scene([(lay, gauss)])
            value = 0.0
            for j in range(cfg.instance_cameras):
                az = (s * cfg.instance_cameras + j) % cfg.n_views
                cam = sample_instance_camera(lay, az, cfg.n_views, cfg.camera)
                img = render_forward(snap_i, cam, cfg.background, cfg.raster)
                res = guidance.instance_provider.provide(
                    GuidanceRequest(
                        image=img.rgb, camera=cam, prompt=lay.prompt,
                        timestep=eta, camera_key=f"inst/{lay.id}/{az}",
                    )
                )
                value += _surrogate_value(res.residual, res.weight) / cfg.instance_cameras
                scaled = (res.weight / cfg.instance_cameras) * res.residual
                bwd = render_backward(snap_i, cam, scaled, cfg.raster)
                ig = bwd.instances[lay.id]
                acc.add(f"{lay.id}/positions", ig.positions, w_loss.beta1)
                acc.add(f"{lay.id}/rotations", ig.rotations_raw, w_loss.beta1)
                acc.add(f"{lay.id}/scales_raw", ig.scales_raw, w_loss.beta1)
                acc.add(f"{lay.id}/opacity_raw", ig.opacity_raw, w_loss.beta1)
                acc.add(f"{lay.id}/colors_raw", ig.colors_raw, w_loss.beta1)
            report.sds_instance[lay.id] = value

    # (b) scene-level guidance; one backward serves both the global term
    # (Gaussians, beta4) and layout refinement (poses, beta3)
    any_learnable = any(
        lay.learnable.center or lay.learnable.scale or lay.learnable.yaw
        or lay.opacity_logit is not None
        for lay in state.layouts
    )
    if guidance.scene_provider is not None and (
        w_loss.beta4 > 0 or (w_loss.beta3 > 0 and any_learnable)
    ):
        snap = state.snapshot()
        value = 0.0
        for j in range(cfg.scene_cameras):
            az = (s * cfg.scene_cameras + j) % cfg.n_views
            cam = sample_scene_camera(state.layouts, az, cfg.n_views, cfg.camera)
            condition = render_layout_condition(state.layouts, cam)
            img = render_forward(snap, cam, cfg.background, cfg.raster)
            res = guidance.scene_provider.provide(
                GuidanceRequest(
                    image=img.rgb, camera=cam, prompt=state.scene_prompt,
                    timestep=eta, condition=condition, camera_key=f"scene/{az}",
                )
            )
            value += _surrogate_value(res.residual, res.weight) / cfg.scene_cameras
            scaled = (res.weight / cfg.scene_cameras) * res.residual
            bwd = render_backward(snap, cam, scaled, cfg.raster)
            for lay in state.layouts:
                ig = bwd.instances[lay.id]
                acc.add(f"{lay.id}/positions", ig.positions, w_loss.beta4)
                acc.add(f"{lay.id}/rotations", ig.rotations_raw, w_loss.beta4)
                acc.add(f"{lay.id}/scales_raw", ig.scales_raw, w_loss.beta4)
                acc.add(f"{lay.id}/opacity_raw", ig.opacity_raw, w_loss.beta4)
                acc.add(f"{lay.id}/colors_raw", ig.colors_raw, w_loss.beta4)
                lg = bwd.layouts[lay.id]
                if lay.learnable.center:
                    acc.add(f"{lay.id}/center", lg.center, w_loss.beta3)
                if lay.learnable.scale:
                    acc.add(f"{lay.id}/scale_factor", lg.scale_factor, w_loss.beta3)
                if lay.learnable.yaw:
                    acc.add(f"{lay.id}/yaw", lg.yaw, w_loss.beta3)
                if lay.opacity_logit is not None:
                    acc.add(f"{lay.id}/opacity_logit", lg.opacity_logit, w_loss.beta3)
        report.global_sds = value
        for lay in state.layouts:
            learnable = (
                lay.learnable.center or lay.learnable.scale or lay.learnable.yaw
            )
            report.refine[lay.id] = value if learnable else 0.0

    # (c) analytic layout and flatness terms
    reg_total = 0.0
    for lay in state.layouts:
        gauss = state.gaussians[lay.id]
        report.layout[lay.id] = layout_loss(gauss, lay)
        if w_loss.beta2 > 0:
            acc.add(f"{lay.id}/positions", layout_loss_grad_positions(gauss, lay), w_loss.beta2)
        reg_total += flatness_regularizer(gauss, lay)
        if w_loss.beta5 > 0:
            d_pos, d_scales = flatness_regularizer_grads(gauss, lay)
            acc.add(f"{lay.id}/positions", d_pos, w_loss.beta5)
            acc.add(f"{lay.id}/scales_raw", d_scales, w_loss.beta5)
    report.reg = reg_total

    acc.check_finite()

    # (d) per-group Adam updates, restricted to active instances
    lr = cfg.learning_rates
    for lay in state.layouts:
        if lay.id not in active:
            continue
        gauss = state.gaussians[lay.id]
        updates = [
            ("positions", gauss.positions, lr.position),
            ("rotations", gauss.rotations, lr.rotation),
            ("scales_raw", gauss.scales_raw, lr.scale),
            ("opacity_raw", gauss.opacity_raw, lr.opacity),
            ("colors_raw", gauss.colors_raw, lr.color),
        ]
        touched_rotations = False
        for name, arr, rate in updates:
            key = f"{lay.id}/{name}"
            if key not in acc.grads:
                continue
            new = _adam_apply(state, key, arr, acc.grads[key], rate, cfg)
            setattr(gauss, name, new)
            touched_rotations |= name == "rotations"
        if touched_rotations:
            gauss.renormalize_rotations()  # (e)
        np.clip(gauss.opacity_raw, None, OPACITY_RAW_MAX, out=gauss.opacity_raw)

        key = f"{lay.id}/center"
        if key in acc.grads:
            lay.center = _adam_apply(state, key, lay.center, acc.grads[key], lr.layout_center, cfg)
        key = f"{lay.id}/scale_factor"
        if key in acc.grads:
            new_k = _adam_apply(
                state, key, np.float64(lay.scale_factor), acc.grads[key], lr.layout_scale, cfg
            )
            lay.scale_factor = float(np.clip(new_k, *SCALE_FACTOR_RANGE))
        key = f"{lay.id}/yaw"
        if key in acc.grads:
            new_yaw = _adam_apply(state, key, np.float64(lay.yaw), acc.grads[key], lr.layout_yaw, cfg)
            lay.yaw = normalize_yaw(float(new_yaw))
        key = f"{lay.id}/opacity_logit"
        if key in acc.grads:
            new_ol = _adam_apply(
                state, key, np.float64(lay.opacity_logit), acc.grads[key], lr.layout_opacity, cfg
            )
            lay.opacity_logit = float(new_ol)

    state.step = s + 1
    return report


def refine_layouts(state: SceneState, cfg: OptimizerConfig, guidance: GuidanceSet) -> LossReport:
    """One refinement-only step: scene-level gradients applied to learnable
    layout poses, everything else untouched."""
    if not any(
        lay.learnable.center or lay.learnable.scale or lay.learnable.yaw
        for lay in state.layouts
    ):
        raise ValueError("refine_layouts requires at least one learnable layout")
    weights = replace(cfg.loss_weights, beta1=0.0, beta2=0.0, beta4=0.0, beta5=0.0)
    return step(state, replace(cfg, loss_weights=weights), guidance)


def run(
    state: SceneState,
    cfg: OptimizerConfig,
    guidance: GuidanceSet,
    callback=None,
    callback_cadence: int = 1,
    active_ids: set[str] | None = None,
) -> OptimizationTrace:
    """Execute cfg.steps steps with the shared linear timestep decay."""
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    horizon = cfg.schedule_steps if cfg.schedule_steps is not None else state.step + cfg.steps
    trace = OptimizationTrace()
    for _ in range(cfg.steps):
        t0 = time.perf_counter()
        s = state.step
        report = step(state, cfg, guidance, step_index=s, total_steps=horizon,
                      active_ids=active_ids)
        poses = {
            lay.id: {
                "center": lay.center.tolist(),
                "scale_factor": lay.scale_factor,
                "yaw": lay.yaw,
            }
            for lay in state.layouts
        }
        eta = timestep_at(s, horizon, cfg.timestep_start, cfg.timestep_end)
        trace.records.append(
            StepRecord(step=s, eta=eta, report=report, layout_poses=poses,
                       wall_time=time.perf_counter() - t0)
        )
        if callback is not None and (s + 1) % callback_cadence == 0:
            callback(state, s + 1, report)
    return trace


def local_reoptimize(
    state: SceneState,
    edited_ids: list[str],
    cfg: OptimizerConfig,
    guidance: GuidanceSet,
    steps: int | None = None,
) -> OptimizationTrace:
    """Optimize only the listed instances; everything else stays bit-identical.

    Scene-level rendering still includes all instances so the frozen ones keep
    providing context to the guidance."""
    if not edited_ids:
        raise ValueError("edited_ids must be non-empty")
    known = set(state.ids())
    unknown = [i for i in edited_ids if i not in known]
    if unknown:
        raise UnknownInstanceError(f"unknown instance ids: {unknown}")
    run_cfg = cfg if steps is None else replace(cfg, steps=steps)
    return run(state, run_cfg, guidance, active_ids=set(edited_ids))
