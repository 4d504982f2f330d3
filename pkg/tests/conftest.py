import numpy as np
import pytest

from layoutsplat.scene import (
    InstanceGaussians,
    InstanceLayout,
    LearnableFlags,
    assemble_scene,
    look_at_camera,
)


def random_layout(rng, ident="inst", learnable=True):
    return InstanceLayout(
        id=ident,
        prompt="a thing",
        center=rng.uniform(-0.5, 0.5, 3),
        extents=rng.uniform(0.5, 1.5, 3),
        scale_factor=rng.uniform(0.7, 1.4),
        yaw=rng.uniform(0.0, 6.28),
        learnable=LearnableFlags(learnable, learnable, learnable),
    )


def random_gaussians(rng, m, spread=0.3, scale_range=(0.05, 0.2)):
    q = rng.normal(size=(m, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return InstanceGaussians(
        positions=rng.uniform(-spread, spread, (m, 3)),
        rotations=q,
        scales_raw=rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (m, 3)),
        opacity_raw=rng.uniform(-1.5, 1.5, m),
        colors_raw=rng.uniform(-1.0, 1.0, (m, 3)),
    )


def random_scene(rng, n_instances=2, m=12):
    instances = [
        (random_layout(rng, ident=f"inst{i}"), random_gaussians(rng, m))
        for i in range(n_instances)
    ]
    return instances, assemble_scene(instances)


def small_camera(width=48, height=40, eye=(2.5, 1.2, 1.4), target=(0.0, 0.0, 0.0)):
    return look_at_camera(eye=np.array(eye), target=np.array(target), width=width, height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
