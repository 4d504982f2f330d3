"""Layout-guided compositional 3D Gaussian splatting engine."""

from .scene import (
    Camera,
    DegenerateGaussianError,
    EmptySceneError,
    InstanceGaussians,
    InstanceLayout,
    LearnableFlags,
    SceneSnapshot,
    assemble_scene,
    build_covariance,
    compose_covariance,
    compose_position,
    decompose_position,
    look_at_camera,
)
from .geometry import (
    SurfaceSamplingConfig,
    flatness_regularizer,
    init_instance,
    nearest_surface_point,
    sample_surface_positions,
)
from .losses import LossReport, LossWeights, layout_loss, total_loss
from .rasterizer import (
    RasterizerConfig,
    RenderedImage,
    RenderGradients,
    pixel_opacity,
    project,
    render_backward,
    render_forward,
    render_naive_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DegenerateGaussianError",
    "EmptySceneError",
    "InstanceGaussians",
    "InstanceLayout",
    "LearnableFlags",
    "LossReport",
    "LossWeights",
    "RasterizerConfig",
    "RenderGradients",
    "RenderedImage",
    "SceneSnapshot",
    "SurfaceSamplingConfig",
    "assemble_scene",
    "build_covariance",
    "compose_covariance",
    "compose_position",
    "decompose_position",
    "flatness_regularizer",
    "init_instance",
    "layout_loss",
    "look_at_camera",
    "nearest_surface_point",
    "pixel_opacity",
    "project",
    "render_backward",
    "render_forward",
    "render_naive_oracle",
    "sample_surface_positions",
    "total_loss",
]
