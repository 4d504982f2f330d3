import math

import numba
import numpy as np
import pytest

from layoutsplat.rasterizer import (
    ProjectedGaussian,
    RasterizerConfig,
    pixel_opacity,
    project,
    render_backward,
    render_forward,
    render_naive_oracle,
)
from layoutsplat.scene import (
    DegenerateGaussianError,
    InstanceGaussians,
    InstanceLayout,
    assemble_scene,
    look_at_camera,
    logit,
)

from conftest import random_gaussians, random_layout, random_scene, small_camera


def single_gaussian_scene(opacity_raw, color_raw=(5.0, 5.0, 5.0), scale=10.0, center=(0, 0, 0)):
    layout = InstanceLayout(id="one", prompt="", center=np.zeros(3), extents=np.ones(3))
    g = InstanceGaussians(
        positions=np.array([center], float),
        rotations=np.array([[1.0, 0, 0, 0]]),
        scales_raw=np.full((1, 3), np.log(scale)),
        opacity_raw=np.array([opacity_raw], float),
        colors_raw=np.array([color_raw], float),
    )
    return assemble_scene([(layout, g)])


class TestProject:
    def test_on_axis_isotropic_covariance(self):
        # symbolic: on the optical axis J = diag(f/z, f/z), W orthonormal, so
        # cov2d = (f*sigma/z)^2 I + dilation I
        z, sigma = 4.0, 0.3
        cam = look_at_camera(eye=[0, 0, 0], target=[0, 0, 1], width=64, height=64, up=np.array([0, 1, 0]))
        cfg = RasterizerConfig()
        pg = project(np.array([0, 0, z]), sigma**2 * np.eye(3), cam, cfg)
        expected = (cam.fx * sigma / z) ** 2 * np.eye(2) + cfg.dilation * np.eye(2)
        np.testing.assert_allclose(pg.cov2d, expected, rtol=1e-9)
        np.testing.assert_allclose(pg.mean2d, [cam.cx, cam.cy], atol=1e-9)
        assert pg.depth == pytest.approx(z)

    def test_behind_camera_culled(self):
        cam = small_camera()
        behind = cam.eye + cam.rotation[2] * (-1.0)
        assert project(behind, 0.01 * np.eye(3), cam) is None

    def test_focal_length_linearity(self):
        cam = look_at_camera(eye=[0, 0, 0], target=[0, 0, 1], width=64, height=64, up=np.array([0, 1, 0]))
        p = np.array([0.3, -0.2, 3.0])
        pg1 = project(p, 0.01 * np.eye(3), cam)
        cam2 = look_at_camera(eye=[0, 0, 0], target=[0, 0, 1], width=64, height=64,
                              fov_y_deg=2 * math.degrees(math.atan(0.5 * math.tan(math.radians(30)))),
                              up=np.array([0, 1, 0]))
        assert cam2.fx == pytest.approx(2 * cam.fx)
        pg2 = project(p, 0.01 * np.eye(3), cam2)
        off1 = pg1.mean2d - [cam.cx, cam.cy]
        off2 = pg2.mean2d - [cam2.cx, cam2.cy]
        np.testing.assert_allclose(off2, 2 * off1, rtol=1e-12)

    def test_offscreen_culled(self):
        cam = look_at_camera(eye=[0, 0, 0], target=[0, 0, 1], width=32, height=32, up=np.array([0, 1, 0]))
        assert project(np.array([50.0, 0, 1.0]), 0.0001 * np.eye(3), cam) is None


class TestPixelOpacity:
    def test_at_mean(self):
        pg = ProjectedGaussian(mean2d=np.array([4.0, 5.0]), cov2d=np.eye(2), depth=1.0, bounds=(0, 0, 8, 8))
        assert pixel_opacity(pg, np.array([4.0, 5.0]), 0.7) == pytest.approx(0.7)

    def test_unit_mahalanobis(self):
        pg = ProjectedGaussian(mean2d=np.zeros(2), cov2d=np.eye(2), depth=1.0, bounds=(0, 0, 8, 8))
        val = pixel_opacity(pg, np.array([1.0, 1.0]), 0.8)
        assert val == pytest.approx(0.8 * math.exp(-1.0), rel=1e-9)
        assert val == pytest.approx(0.29430, abs=5e-6)

    def test_zero_alpha(self):
        pg = ProjectedGaussian(mean2d=np.zeros(2), cov2d=np.eye(2), depth=1.0, bounds=(0, 0, 8, 8))
        assert pixel_opacity(pg, np.array([3.0, -2.0]), 0.0) == 0.0

    def test_singular_covariance_raises(self):
        pg = ProjectedGaussian(mean2d=np.zeros(2), cov2d=np.zeros((2, 2)), depth=1.0, bounds=(0, 0, 8, 8))
        with pytest.raises(DegenerateGaussianError):
            pixel_opacity(pg, np.array([0.0, 0.0]), 0.5)


class TestForward:
    def test_empty_scene_renders_background(self):
        layout = InstanceLayout(id="none", prompt="", center=np.zeros(3), extents=np.ones(3))
        g = InstanceGaussians(
            positions=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
            scales_raw=np.zeros((0, 3)), opacity_raw=np.zeros(0), colors_raw=np.zeros((0, 3)),
        )
        snap = assemble_scene([(layout, g)])
        cam = small_camera(width=16, height=12)
        img = render_forward(snap, cam, (0.2, 0.4, 0.6))
        np.testing.assert_allclose(img.rgb, np.tile([0.2, 0.4, 0.6], (12, 16, 1)))
        np.testing.assert_allclose(img.alpha, 0.0)

    def test_single_gaussian_half_opacity(self):
        snap = single_gaussian_scene(opacity_raw=logit(0.5))
        cam = look_at_camera(eye=[0, -3, 0], target=[0, 0, 0], width=17, height=17)
        img = render_forward(snap, cam, (0.0, 0.0, 0.0))
        center = img.rgb[8, 8]
        # alpha' ~ 0.5 at the mean (scale huge so the falloff is negligible), color ~ 1
        np.testing.assert_allclose(center, 0.5 * (1 / (1 + math.exp(-5.0))) * np.ones(3), atol=1e-3)

    def test_two_stacked_gaussians(self):
        # two half-opacity white gaussians: C = 0.5 + 0.5*0.5 = 0.75, bg term 0.25*bg
        layout = InstanceLayout(id="two", prompt="", center=np.zeros(3), extents=np.ones(3))
        g = InstanceGaussians(
            positions=np.array([[0, 0.1, 0], [0, -0.1, 0]], float),
            rotations=np.array([[1.0, 0, 0, 0]] * 2),
            scales_raw=np.full((2, 3), np.log(50.0)),
            opacity_raw=np.full(2, logit(0.5)),
            colors_raw=np.full((2, 3), 30.0),  # sigmoid -> 1.0
        )
        snap = assemble_scene([(layout, g)])
        cam = look_at_camera(eye=[0, -3, 0], target=[0, 0, 0], width=9, height=9)
        bg = 0.8
        img = render_forward(snap, cam, (bg, bg, bg))
        np.testing.assert_allclose(img.rgb[4, 4], 0.75 + 0.25 * bg, atol=2e-3)

    def test_opaque_gaussian_shows_its_color(self):
        snap = single_gaussian_scene(opacity_raw=30.0, color_raw=(2.0, -2.0, 0.0), scale=10.0)
        cam = look_at_camera(eye=[0, -3, 0], target=[0, 0, 0], width=9, height=9)
        img = render_forward(snap, cam, (0.0, 0.0, 0.0))
        expected = 1 / (1 + np.exp(-np.array([2.0, -2.0, 0.0])))
        np.testing.assert_allclose(img.rgb[4, 4], expected, atol=1e-5)


class TestOracleEquivalence:
    def test_exact_config_matches_oracle(self, rng):
        cfg = RasterizerConfig.exact()
        for i in range(3):
            _, snap = random_scene(rng, n_instances=2, m=100)
            cam = small_camera(width=48, height=40)
            fast = render_forward(snap, cam, (0.1, 0.2, 0.3), cfg)
            oracle = render_naive_oracle(snap, cam, (0.1, 0.2, 0.3), cfg)
            assert np.abs(fast.rgb - oracle.rgb).max() < 1e-9
            assert np.abs(fast.alpha - oracle.alpha).max() < 1e-9

    def test_single_precision_within_tolerance(self, rng):
        cfg32 = RasterizerConfig(dtype=np.float32, contribution_cutoff=1e-7,
                                 early_stop_transmittance=1e-6)
        _, snap = random_scene(rng, n_instances=2, m=150)
        cam = small_camera(width=48, height=40)
        fast = render_forward(snap, cam, (0.1, 0.2, 0.3), cfg32)
        oracle = render_naive_oracle(snap, cam, (0.1, 0.2, 0.3))
        assert np.abs(fast.rgb - oracle.rgb).max() < 1e-4

    def test_default_config_close_to_oracle(self, rng):
        _, snap = random_scene(rng, n_instances=1, m=200)
        cam = small_camera()
        fast = render_forward(snap, cam)
        oracle = render_naive_oracle(snap, cam)
        # default path truncates below ~1/255 contribution
        assert np.abs(fast.rgb - oracle.rgb).max() < 0.02


class TestCompositingInvariants:
    def test_partition_of_unity(self, rng):
        for _ in range(3):
            _, snap = random_scene(rng, n_instances=2, m=80)
            cam = small_camera(width=32, height=24)
            _, (wsum, trans) = render_naive_oracle(snap, cam, return_partition=True)
            np.testing.assert_allclose(wsum + trans, 1.0, atol=1e-9)

    def test_determinism_across_runs_and_threads(self, rng):
        _, snap = random_scene(rng, n_instances=2, m=120)
        cam = small_camera()
        prev = numba.get_num_threads()
        try:
            numba.set_num_threads(1)
            a = render_forward(snap, cam)
            b = render_forward(snap, cam)
            numba.set_num_threads(2)
            c = render_forward(snap, cam)
        finally:
            numba.set_num_threads(prev)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.rgb, c.rgb)


def scene_loss(instances, cam, residual, cfg):
    snap = assemble_scene(instances)
    img = render_forward(snap, cam, (0.0, 0.0, 0.0), cfg)
    return float(np.sum(residual * img.rgb))


class TestBackward:
    def test_zero_residual_zero_gradients(self, rng):
        _, snap = random_scene(rng, n_instances=2, m=20)
        cam = small_camera(width=24, height=20)
        grads = render_backward(snap, cam, np.zeros((20, 24, 3)))
        for ig in grads.instances.values():
            assert np.all(ig.positions == 0)
            assert np.all(ig.opacity_raw == 0)
        for lg in grads.layouts.values():
            assert np.all(lg.center == 0) and lg.yaw == 0 and lg.scale_factor == 0

    def test_residual_shape_mismatch(self, rng):
        _, snap = random_scene(rng, n_instances=1, m=5)
        cam = small_camera(width=24, height=20)
        with pytest.raises(ValueError):
            render_backward(snap, cam, np.zeros((20, 23, 3)))

    def test_gradients_match_finite_differences(self, rng):
        cfg = RasterizerConfig.exact()
        cam = small_camera(width=24, height=20)
        residual = rng.normal(size=(20, 24, 3))
        instances, snap = random_scene(rng, n_instances=2, m=8)
        grads = render_backward(snap, cam, residual, cfg)
        h = 1e-5

        def fd(get, set_):
            v = get()
            set_(v + h)
            lp = scene_loss(instances, cam, residual, cfg)
            set_(v - h)
            lm = scene_loss(instances, cam, residual, cfg)
            set_(v)
            return (lp - lm) / (2 * h)

        checked = 0
        for layout, g in instances:
            ig = grads.instances[layout.id]
            lg = grads.layouts[layout.id]
            for mi in range(0, g.count, 3):
                pairs = [
                    (ig.positions[mi, 0], lambda: g.positions[mi, 0],
                     lambda v: g.positions.__setitem__((mi, 0), v)),
                    (ig.rotations_raw[mi, 1], lambda: g.rotations[mi, 1],
                     lambda v: g.rotations.__setitem__((mi, 1), v)),
                    (ig.scales_raw[mi, 2], lambda: g.scales_raw[mi, 2],
                     lambda v: g.scales_raw.__setitem__((mi, 2), v)),
                    (ig.opacity_raw[mi], lambda: g.opacity_raw[mi],
                     lambda v: g.opacity_raw.__setitem__(mi, v)),
                    (ig.colors_raw[mi, 0], lambda: g.colors_raw[mi, 0],
                     lambda v: g.colors_raw.__setitem__((mi, 0), v)),
                ]
                for an, get, set_ in pairs:
                    val = fd(get, set_)
                    assert an == pytest.approx(val, rel=1e-3, abs=1e-8)
                    checked += 1
            layout_pairs = [
                (lg.center[0], lambda: layout.center[0],
                 lambda v: layout.center.__setitem__(0, v)),
                (lg.scale_factor, lambda: layout.scale_factor,
                 lambda v: setattr(layout, "scale_factor", v)),
                (lg.yaw, lambda: layout.yaw, lambda v: setattr(layout, "yaw", v)),
            ]
            for an, get, set_ in layout_pairs:
                val = fd(get, set_)
                assert an == pytest.approx(val, rel=1e-3, abs=1e-8)
                checked += 1
        assert checked >= 30

    def test_gradient_completeness(self, rng):
        # every parameter group shows a nonzero gradient on a random scene
        cfg = RasterizerConfig.exact()
        cam = small_camera(width=24, height=20)
        residual = rng.normal(size=(20, 24, 3))
        _, snap = random_scene(rng, n_instances=1, m=10)
        grads = render_backward(snap, cam, residual, cfg)
        ig = grads.instances["inst0"]
        lg = grads.layouts["inst0"]
        assert np.any(ig.positions != 0)
        assert np.any(ig.rotations_raw != 0)
        assert np.any(ig.scales_raw != 0)
        assert np.any(ig.opacity_raw != 0)
        assert np.any(ig.colors_raw != 0)
        assert np.any(lg.center != 0)
        assert lg.scale_factor != 0
        assert lg.yaw != 0

    def test_translation_gradient_sign(self, rng):
        # residual bright on the left half: moving the instance along the
        # direction that shifts its splat left must increase <residual, I>
        cfg = RasterizerConfig.exact()
        instances, snap = random_scene(rng, n_instances=1, m=15)
        cam = small_camera(width=32, height=24)
        residual = np.zeros((24, 32, 3))
        residual[:, :16, :] = 1.0
        grads = render_backward(snap, cam, residual, cfg)
        layout, g = instances[0]
        h = 1e-4
        for axis in range(3):
            c0 = layout.center.copy()
            layout.center = c0 + np.eye(3)[axis] * h
            lp = scene_loss(instances, cam, residual, cfg)
            layout.center = c0 - np.eye(3)[axis] * h
            lm = scene_loss(instances, cam, residual, cfg)
            layout.center = c0
            predicted = (lp - lm) / (2 * h)
            if abs(predicted) > 1e-6:
                assert np.sign(grads.layouts[layout.id].center[axis]) == np.sign(predicted)
