"""Joint Gaussian/pose refinement and test-view pose alignment."""

from types import SimpleNamespace

import numpy as np
import pytest

from sparsesplat.bundle import (
    OptimConfig,
    align_test_poses,
    confidence_lr,
    gauba_optimize,
    _view_loss,
)
from sparsesplat.errors import (
    EmptySceneError,
    InvalidInputError,
    OptimizationDivergedError,
)
from sparsesplat.geometry import Camera, GaussianCloud, rotation_to_quat
from sparsesplat.renderer import RenderGradients, render_forward

WIDTH = 48
HEIGHT = 48
FOCAL = 55.0


def look_at(eye, target=(0.0, 0.0, 0.0)):
    """Camera-to-world rotation with +z aimed from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.array([0.0, 1.0, 0.0]), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def orbit_camera(angle_rad, radius=4.0, lift=0.0):
    eye = np.array([radius * np.sin(angle_rad), lift, -radius * np.cos(angle_rad)])
    quat = rotation_to_quat(look_at(eye))
    return Camera.centered(WIDTH, HEIGHT, FOCAL, quat=quat, t=eye)


def textured_cloud(rng, n=64):
    positions = rng.uniform(-0.9, 0.9, (n, 3))
    positions[:, 2] *= 0.5
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (rng.uniform(0.1, 0.9, (n, 3)) - 0.5) / 0.28209479177387814
    logits = rng.uniform(0.5, 2.5, n)
    quats = rng.normal(0.0, 1.0, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.08), np.log(0.2), (n, 3))
    confidences = rng.uniform(2.5, 6.0, n)
    return GaussianCloud(positions, sh, logits, quats, log_scales, confidences)


def rotation_error_deg(cam_a, cam_b):
    rel = cam_a.rotation().T @ cam_b.rotation()
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def perturb(cam, angle_rad, shift):
    """Rotate about a fixed diagonal axis and displace the center."""
    axis = np.array([0.6, -0.64, 0.48])
    axis /= np.linalg.norm(axis)
    twist = np.concatenate([np.asarray(shift, dtype=np.float64), angle_rad * axis])
    return cam.apply_twist(twist)


def snapshot(cloud):
    return (
        cloud.positions.copy(),
        cloud.sh.copy(),
        cloud.opacity_logits.copy(),
        cloud.rotations.copy(),
        cloud.log_scales.copy(),
        cloud.confidences.copy(),
    )


@pytest.fixture(scope="module")
def gt_scene():
    rng = np.random.default_rng(11)
    cloud = textured_cloud(rng)
    cameras = [orbit_camera(a, lift=l) for a, l in ((-0.42, 0.2), (0.0, -0.1), (0.45, 0.25))]
    images = [render_forward(cloud, cam).rgb for cam in cameras]
    return cloud, cameras, images


class TestConfidenceLr:
    def test_midpoint_is_exactly_half_beta(self):
        assert confidence_lr(0.0, 100.0) == 50.0

    def test_strictly_decreasing_over_sweep(self):
        conf = np.linspace(-8.0, 8.0, 1000)
        out = confidence_lr(conf, 100.0)
        assert np.all(np.diff(out) < 0.0)

    def test_open_range(self):
        conf = np.linspace(-30.0, 30.0, 500)
        out = confidence_lr(conf, 7.5)
        assert np.all(out > 0.0)
        assert np.all(out < 7.5)

    def test_scalar_in_scalar_out(self):
        out = confidence_lr(2.0, 10.0)
        assert isinstance(out, float)

    def test_rejects_bad_beta(self):
        with pytest.raises(InvalidInputError):
            confidence_lr(0.0, 0.0)
        with pytest.raises(InvalidInputError):
            confidence_lr(0.0, -3.0)
        with pytest.raises(InvalidInputError):
            confidence_lr(0.0, np.nan)

    def test_rejects_non_finite_confidence(self):
        with pytest.raises(InvalidInputError):
            confidence_lr(np.array([1.0, np.inf]), 10.0)


class TestOptimConfig:
    def test_preset_s(self):
        cfg = OptimConfig.preset("s")
        assert cfg.iterations == 200
        assert cfg.loss_stride == 4

    def test_preset_xl_case_insensitive(self):
        cfg = OptimConfig.preset("XL")
        assert cfg.iterations == 1000
        assert cfg.loss_stride == 4

    def test_preset_overrides(self):
        cfg = OptimConfig.preset("s", iterations=7, lambda_dssim=0.25)
        assert cfg.iterations == 7
        assert cfg.lambda_dssim == 0.25

    def test_unknown_preset_rejected(self):
        with pytest.raises(InvalidInputError):
            OptimConfig.preset("medium")

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(iterations=0),
            dict(test_iterations=0),
            dict(beta=0.0),
            dict(beta=np.inf),
            dict(lambda_dssim=-0.1),
            dict(lambda_dssim=1.5),
            dict(loss_stride=0),
            dict(test_patience=-1),
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(InvalidInputError):
            OptimConfig(**kwargs)


class TestViewLoss:
    def test_stride_lattice_matches_manual_subsample(self, gt_scene):
        cloud, cameras, images = gt_scene
        rng = np.random.default_rng(3)
        other = textured_cloud(rng, n=40)
        full = render_forward(other, cameras[0]).rgb.rgb
        observed = images[0].rgb
        loss, _, dloss = _view_loss(other, cameras[0], observed, 0.0, 2, None)
        sub = full[::2, ::2] - observed[::2, ::2]
        assert loss == pytest.approx(np.abs(sub).mean(), rel=0, abs=1e-15)
        off_lattice = np.ones((HEIGHT, WIDTH, 3), dtype=bool)
        off_lattice[::2, ::2] = False
        assert np.all(dloss[off_lattice] == 0.0)


class TestGaubaOptimize:
    def test_ground_truth_is_a_fixed_point(self, gt_scene):
        cloud, cameras, images = gt_scene
        cfg = OptimConfig(iterations=5)
        refined, cams, report = gauba_optimize(cloud, cameras, images, cfg)
        assert report.initial_loss == 0.0
        assert np.all(report.loss_trace < 1e-4)
        assert np.allclose(refined.positions, cloud.positions, atol=1e-3)
        assert np.allclose(refined.sh, cloud.sh, atol=1e-3)
        assert np.allclose(refined.opacity_logits, cloud.opacity_logits, atol=1e-3)
        assert np.allclose(refined.log_scales, cloud.log_scales, atol=1e-3)
        for before, after in zip(cameras, cams):
            assert rotation_error_deg(before, after) < 0.05
            assert np.allclose(before.t, after.t, atol=1e-3)

    def test_camera_zero_is_returned_untouched(self, gt_scene):
        cloud, cameras, images = gt_scene
        cfg = OptimConfig(iterations=4)
        _, cams, _ = gauba_optimize(cloud, cameras, images, cfg)
        assert cams[0] is cameras[0]

    def test_input_cloud_is_not_mutated(self, gt_scene):
        cloud, cameras, images = gt_scene
        before = snapshot(cloud)
        gauba_optimize(cloud, cameras, images, OptimConfig(iterations=3))
        after = snapshot(cloud)
        for a, b in zip(before, after):
            assert np.array_equal(a, b)

    def test_point_count_preserved_and_quats_unit(self, gt_scene):
        cloud, cameras, images = gt_scene
        jittered = cloud.copy()
        rng = np.random.default_rng(5)
        jittered.positions += rng.normal(0.0, 0.02, jittered.positions.shape)
        cfg = OptimConfig(iterations=10)
        refined, _, _ = gauba_optimize(jittered, cameras, images, cfg)
        assert len(refined) == len(cloud)
        norms = np.linalg.norm(refined.rotations, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_loss_decreases_from_jittered_start(self, gt_scene):
        cloud, cameras, images = gt_scene
        jittered = cloud.copy()
        rng = np.random.default_rng(8)
        jittered.positions += rng.normal(0.0, 0.03, jittered.positions.shape)
        jittered.sh += rng.normal(0.0, 0.1, jittered.sh.shape)
        cfg = OptimConfig(iterations=40)
        _, _, report = gauba_optimize(jittered, cameras, images, cfg)
        assert report.loss_trace.shape == (40,)
        assert np.all(np.isfinite(report.loss_trace))
        assert report.final_loss < report.initial_loss
        assert report.converged

    def test_pose_perturbation_recovered(self, gt_scene):
        cloud, cameras, images = gt_scene
        extent = np.linalg.norm(
            cloud.positions - cloud.positions.mean(axis=0), axis=1
        )
        scale = float(np.sqrt((extent**2).mean()))
        shifted = [
            cameras[0],
            perturb(cameras[1], np.radians(1.0), np.array([0.01, 0.0, 0.0]) * scale),
            perturb(cameras[2], np.radians(1.0), np.array([0.0, -0.01, 0.0]) * scale),
        ]
        cfg = OptimConfig.preset("xl", loss_stride=1)
        _, cams, report = gauba_optimize(cloud, shifted, images, cfg)
        assert report.final_loss < report.initial_loss
        for v in (1, 2):
            assert rotation_error_deg(cams[v], cameras[v]) < 0.1
            assert np.linalg.norm(cams[v].t - cameras[v].t) < 1e-3 * scale

    def test_deterministic_reports(self, gt_scene):
        cloud, cameras, images = gt_scene
        jittered = cloud.copy()
        jittered.positions += 0.02
        cfg = OptimConfig(iterations=6)
        out_a = gauba_optimize(jittered, cameras, images, cfg)
        out_b = gauba_optimize(jittered, cameras, images, cfg)
        assert np.array_equal(out_a[2].loss_trace, out_b[2].loss_trace)
        assert np.array_equal(out_a[0].positions, out_b[0].positions)
        for cam_a, cam_b in zip(out_a[1], out_b[1]):
            assert np.array_equal(cam_a.quat, cam_b.quat)
            assert np.array_equal(cam_a.t, cam_b.t)

    def test_dssim_term_participates(self, gt_scene):
        cloud, cameras, images = gt_scene
        jittered = cloud.copy()
        jittered.sh += 0.15
        cfg = OptimConfig(iterations=12, lambda_dssim=0.3)
        _, _, report = gauba_optimize(jittered, cameras, images, cfg)
        assert np.all(np.isfinite(report.loss_trace))
        assert report.final_loss < report.initial_loss

    def test_non_finite_loss_names_iteration(self, gt_scene, monkeypatch):
        cloud, cameras, images = gt_scene
        observed = [img.rgb for img in images]

        def fake_forward(cloud, camera, background=None, **kwargs):
            rgb = np.full((camera.height, camera.width, 3), np.nan)
            return SimpleNamespace(rgb=SimpleNamespace(rgb=rgb))

        def fake_backward(cloud, camera, out, dloss):
            n = len(cloud)
            return RenderGradients(
                d_position=np.zeros((n, 3)),
                d_sh=np.zeros_like(cloud.sh),
                d_opacity_logit=np.zeros(n),
                d_rotation=np.zeros((n, 4)),
                d_log_scale=np.zeros((n, 3)),
                d_pose_twist=np.zeros(6),
                d_focal=0.0,
            )

        monkeypatch.setattr("sparsesplat.bundle.render_forward", fake_forward)
        monkeypatch.setattr("sparsesplat.bundle.render_backward", fake_backward)
        with pytest.raises(OptimizationDivergedError) as exc:
            gauba_optimize(cloud, cameras, observed, OptimConfig(iterations=3))
        assert exc.value.iteration == 0

    def test_rejects_bad_inputs(self, gt_scene):
        cloud, cameras, images = gt_scene
        empty = GaussianCloud(
            np.zeros((0, 3)),
            np.zeros((0, 1, 3)),
            np.zeros(0),
            np.zeros((0, 4)),
            np.zeros((0, 3)),
            np.zeros(0),
        )
        cfg = OptimConfig(iterations=2)
        with pytest.raises(EmptySceneError):
            gauba_optimize(empty, cameras, images, cfg)
        with pytest.raises(InvalidInputError):
            gauba_optimize(cloud, cameras[:1], images[:1], cfg)
        with pytest.raises(InvalidInputError):
            gauba_optimize(cloud, cameras, images[:2], cfg)
        small = np.zeros((HEIGHT // 2, WIDTH // 2, 3))
        with pytest.raises(InvalidInputError):
            gauba_optimize(cloud, cameras, [small] * len(cameras), cfg)


class TestAlignTestPoses:
    def test_training_pose_is_a_fixed_point(self, gt_scene):
        cloud, cameras, images = gt_scene
        cfg = OptimConfig()
        refined = align_test_poses(cloud, [cameras[1]], [images[1]], cfg)
        assert rotation_error_deg(refined[0], cameras[1]) < np.degrees(1e-5)
        assert np.linalg.norm(refined[0].t - cameras[1].t) < 1e-5

    def test_small_perturbation_recovered(self, gt_scene):
        cloud, cameras, images = gt_scene
        start = perturb(cameras[1], np.radians(0.5), np.array([0.004, -0.003, 0.002]))
        cfg = OptimConfig()
        refined = align_test_poses(cloud, [start], [images[1]], cfg)
        assert rotation_error_deg(refined[0], cameras[1]) < 0.05

    def test_payload_is_frozen(self, gt_scene):
        cloud, cameras, images = gt_scene
        before = snapshot(cloud)
        start = perturb(cameras[2], np.radians(0.3), np.array([0.002, 0.0, 0.0]))
        align_test_poses(cloud, [start], [images[2]], OptimConfig(test_iterations=30))
        after = snapshot(cloud)
        for a, b in zip(before, after):
            assert np.array_equal(a, b)

    def test_deterministic(self, gt_scene):
        cloud, cameras, images = gt_scene
        start = perturb(cameras[1], np.radians(0.4), np.array([0.0, 0.003, 0.0]))
        cfg = OptimConfig(test_iterations=40)
        out_a = align_test_poses(cloud, [start], [images[1]], cfg)
        out_b = align_test_poses(cloud, [start], [images[1]], cfg)
        assert np.array_equal(out_a[0].quat, out_b[0].quat)
        assert np.array_equal(out_a[0].t, out_b[0].t)

    def test_rejects_mismatched_views(self, gt_scene):
        cloud, cameras, images = gt_scene
        with pytest.raises(InvalidInputError):
            align_test_poses(cloud, cameras[:2], images[:1], OptimConfig())
