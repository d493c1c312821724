"""Geometric primitive tests: quaternions, SE(3), covariances, SH, cameras."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesplat.errors import BehindCameraError, InvalidInputError
from sparsesplat.geometry import (
    SH_C0,
    Camera,
    GaussianCloud,
    ImageBuffer,
    Z_NEAR,
    backproject,
    build_covariance,
    eval_sh,
    logit,
    normalize_quat,
    project,
    project_valid,
    quat_to_rotation,
    rotation_to_quat,
    se3_exp,
    se3_log,
    sh_basis,
    sh_basis_gradient,
    sigmoid,
    skew,
)

unit_floats = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


def random_unit_quat(rng, n=None):
    q = rng.normal(size=(4,) if n is None else (n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


class TestQuaternions:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_rotation([1.0, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        s = np.sqrt(0.5)
        R = quat_to_rotation([s, 0.0, 0.0, s])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(R, expected, atol=1e-15)

    def test_rotation_properties(self):
        rng = np.random.default_rng(0)
        R = quat_to_rotation(random_unit_quat(rng, 50))
        np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)

    def test_non_unit_input_is_normalized(self):
        np.testing.assert_allclose(
            quat_to_rotation([2.0, 0, 0, 0]), quat_to_rotation([1.0, 0, 0, 0])
        )

    def test_zero_quat_rejected(self):
        with pytest.raises(InvalidInputError):
            normalize_quat([0.0, 0.0, 0.0, 0.0])

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_matrix_roundtrip(self, qlist):
        q = np.asarray(qlist)
        if np.linalg.norm(q) < 1e-3:
            return
        q /= np.linalg.norm(q)
        q2 = rotation_to_quat(quat_to_rotation(q))
        # Quaternion double cover: q and -q encode the same rotation.
        if np.dot(q, q2) < 0:
            q2 = -q2
        np.testing.assert_allclose(q2, q, atol=1e-9)

    def test_canonical_sign(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            assert rotation_to_quat(quat_to_rotation(random_unit_quat(rng)))[0] >= 0


class TestSkewAndCovariance:
    def test_skew_matches_cross(self):
        rng = np.random.default_rng(1)
        v, u = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(skew(v) @ u, np.cross(v, u))

    def test_axis_aligned(self):
        cov = build_covariance([1.0, 0, 0, 0], np.log([2.0, 3.0, 5.0]))
        np.testing.assert_allclose(cov, np.diag([4.0, 9.0, 25.0]))

    def test_quarter_turn_swaps_axes(self):
        # Rotating a (2, 1, 1)-scaled Gaussian 90 degrees about z moves the
        # long axis from x to y.
        s = np.sqrt(0.5)
        cov = build_covariance([s, 0.0, 0.0, s], [np.log(2.0), 0.0, 0.0])
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-14)

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(2)
        q = random_unit_quat(rng, 30)
        ls = rng.uniform(-2, 1, (30, 3))
        cov = build_covariance(q, ls)
        np.testing.assert_allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-12)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            build_covariance([1.0, 0, 0, 0], [np.nan, 0.0, 0.0])


class TestSE3:
    def test_zero_twist_is_identity(self):
        R, t = se3_exp(np.zeros(6))
        np.testing.assert_allclose(R, np.eye(3))
        np.testing.assert_allclose(t, np.zeros(3))

    def test_pure_translation(self):
        R, t = se3_exp([1.0, -2.0, 3.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(R, np.eye(3))
        np.testing.assert_allclose(t, [1.0, -2.0, 3.0])

    @given(
        st.lists(st.floats(-2, 2), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3),
        st.floats(0.0, np.pi - 0.1),
    )
    @settings(max_examples=60, deadline=None)
    def test_exp_log_roundtrip(self, vlist, axislist, angle):
        axis = np.asarray(axislist)
        norm = np.linalg.norm(axis)
        omega = np.zeros(3) if norm < 1e-6 else axis / norm * angle
        twist = np.concatenate([vlist, omega])
        R, t = se3_exp(twist)
        np.testing.assert_allclose(se3_log(R, t), twist, atol=1e-9)

    def test_small_angle_branch_is_continuous(self):
        # The Taylor fallback and the closed form must agree near the switch.
        twist = np.array([0.3, -0.1, 0.2, 4e-9, -3e-9, 2e-9])
        R_small, t_small = se3_exp(twist)
        twist_big = twist.copy()
        twist_big[3:] *= 100.0
        R_big, t_big = se3_exp(twist_big)
        np.testing.assert_allclose(R_small, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(t_small, t_big, atol=1e-7)

    def test_non_finite_twist_rejected(self):
        with pytest.raises(InvalidInputError):
            se3_exp([np.inf, 0, 0, 0, 0, 0])


class TestSphericalHarmonics:
    def test_dc_band_is_constant(self):
        rng = np.random.default_rng(4)
        dirs = rng.normal(size=(10, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        np.testing.assert_allclose(sh_basis(dirs, 0)[:, 0], SH_C0)

    def test_band_parity(self):
        """Band l flips sign as (-1)^l under direction negation."""
        rng = np.random.default_rng(5)
        dirs = rng.normal(size=(20, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        basis_pos = sh_basis(dirs, 3)
        basis_neg = sh_basis(-dirs, 3)
        for band_l, sl in ((0, slice(0, 1)), (1, slice(1, 4)), (2, slice(4, 9)), (3, slice(9, 16))):
            np.testing.assert_allclose(basis_neg[:, sl], (-1.0) ** band_l * basis_pos[:, sl], atol=1e-14)

    def test_orthonormality_monte_carlo(self):
        """E[Y_i Y_j] over the uniform sphere is delta_ij / (4 pi)."""
        rng = np.random.default_rng(6)
        dirs = rng.normal(size=(200_000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        basis = sh_basis(dirs, 3)
        gram = basis.T @ basis / dirs.shape[0]
        np.testing.assert_allclose(gram, np.eye(16) / (4.0 * np.pi), atol=2e-3)

    def test_eval_sh_dc_only(self):
        coeffs = np.zeros((1, 3))
        coeffs[0] = [0.4, -0.2, 1.9]
        rgb = eval_sh(coeffs, 0, [0.0, 0.0, 1.0])
        np.testing.assert_allclose(rgb, np.clip(SH_C0 * coeffs[0] + 0.5, 0.0, 1.0))

    def test_eval_sh_clamps(self):
        coeffs = np.full((1, 3), 10.0)
        np.testing.assert_array_equal(eval_sh(coeffs, 0, [0, 0, 1.0]), [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(eval_sh(-coeffs, 0, [0, 0, 1.0]), [0.0, 0.0, 0.0])

    def test_eval_sh_band_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            eval_sh(np.zeros((4, 3)), 2, [0, 0, 1.0])

    def test_degree_out_of_range(self):
        with pytest.raises(InvalidInputError):
            sh_basis(np.array([[0.0, 0.0, 1.0]]), 4)

    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_basis_gradient_matches_fd(self, degree):
        rng = np.random.default_rng(7)
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        grad = sh_basis_gradient(dirs, degree)
        h = 1e-6
        for k in range(3):
            dp = dirs.copy()
            dp[:, k] += h
            dm = dirs.copy()
            dm[:, k] -= h
            fd = (sh_basis(dp, degree) - sh_basis(dm, degree)) / (2 * h)
            np.testing.assert_allclose(grad[:, :, k], fd, atol=1e-8)


class TestLogistic:
    def test_inverse_pair(self):
        x = np.linspace(-20, 20, 41)
        np.testing.assert_allclose(logit(sigmoid(x)), x, atol=1e-9)

    def test_extreme_inputs_stay_finite(self):
        assert sigmoid(-500.0) == pytest.approx(0.0)
        assert sigmoid(500.0) == pytest.approx(1.0)
        assert np.isfinite(sigmoid(np.array([-500.0, 500.0]))).all()


class TestCamera:
    def test_centered_principal_point(self):
        cam = Camera.centered(64, 48, 50.0)
        assert cam.cx == pytest.approx(31.5)
        assert cam.cy == pytest.approx(23.5)

    def test_world_to_camera_inverts_pose(self):
        rng = np.random.default_rng(8)
        cam = Camera.centered(8, 8, 10.0, quat=random_unit_quat(rng), t=rng.normal(size=3))
        R_wc, t_wc = cam.world_to_camera()
        np.testing.assert_allclose(R_wc @ cam.rotation(), np.eye(3), atol=1e-12)
        np.testing.assert_allclose(R_wc @ cam.t + t_wc, np.zeros(3), atol=1e-12)

    def test_invalid_focal(self):
        with pytest.raises(InvalidInputError):
            Camera.centered(8, 8, -1.0)

    def test_apply_twist_zero_is_identity(self):
        cam = Camera.centered(8, 8, 10.0, t=np.array([1.0, 2.0, 3.0]))
        moved = cam.apply_twist(np.zeros(6))
        np.testing.assert_allclose(moved.quat, cam.quat)
        np.testing.assert_allclose(moved.t, cam.t)

    def test_apply_twist_left_multiplies(self):
        rng = np.random.default_rng(9)
        cam = Camera.centered(8, 8, 10.0, quat=random_unit_quat(rng), t=rng.normal(size=3))
        twist = np.array([0.1, -0.2, 0.05, 0.03, 0.02, -0.04])
        moved = cam.apply_twist(twist)
        R_d, t_d = se3_exp(twist)
        np.testing.assert_allclose(moved.rotation(), R_d @ cam.rotation(), atol=1e-12)
        np.testing.assert_allclose(moved.t, R_d @ cam.t + t_d, atol=1e-12)

    def test_pixel_rays_hit_pixel_centers(self):
        cam = Camera.centered(6, 4, 9.0)
        rays = cam.pixel_rays()
        assert rays.shape == (4, 6, 3)
        world = rays * 2.0 @ cam.rotation().T + cam.t  # depth-2 lift
        uv, depth = project(cam, world.reshape(-1, 3))
        expect_u, expect_v = np.meshgrid(np.arange(6.0), np.arange(4.0))
        np.testing.assert_allclose(uv[:, 0], expect_u.ravel(), atol=1e-10)
        np.testing.assert_allclose(uv[:, 1], expect_v.ravel(), atol=1e-10)
        np.testing.assert_allclose(depth, 2.0)


class TestProjection:
    @given(
        st.lists(st.floats(-5, 5), min_size=2, max_size=2),
        st.floats(0.05, 50.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_project_backproject_roundtrip(self, pixel, depth):
        cam = Camera.centered(
            32, 24, 20.0, quat=np.array([0.9, 0.1, -0.3, 0.2]), t=np.array([0.5, -1.0, 2.0])
        )
        world = backproject(cam, np.asarray(pixel) * 10.0, depth)
        uv, z = project(cam, world)
        np.testing.assert_allclose(uv, np.asarray(pixel) * 10.0, atol=1e-6)
        assert z == pytest.approx(depth, abs=1e-6)

    def test_behind_camera_raises(self):
        cam = Camera.centered(8, 8, 10.0)
        with pytest.raises(BehindCameraError):
            project(cam, np.array([0.0, 0.0, -1.0]))

    def test_near_plane_boundary(self):
        cam = Camera.centered(8, 8, 10.0)
        _, _, valid = project_valid(cam, np.array([0.0, 0.0, Z_NEAR]))
        assert not valid
        _, _, valid = project_valid(cam, np.array([0.0, 0.0, Z_NEAR + 1e-6]))
        assert valid

    def test_backproject_rejects_nonpositive_depth(self):
        cam = Camera.centered(8, 8, 10.0)
        with pytest.raises(InvalidInputError):
            backproject(cam, np.array([1.0, 1.0]), 0.0)


class TestContainers:
    def make_cloud(self, n=4, bands=4):
        rng = np.random.default_rng(10)
        return GaussianCloud(
            rng.normal(size=(n, 3)),
            rng.normal(size=(n, bands, 3)),
            rng.normal(size=n),
            random_unit_quat(rng, n),
            rng.normal(size=(n, 3)),
            np.ones(n),
        )

    def test_sh_degree_from_band_count(self):
        assert self.make_cloud(bands=1).sh_degree == 0
        assert self.make_cloud(bands=4).sh_degree == 1
        assert self.make_cloud(bands=16).sh_degree == 3

    def test_bad_band_count_rejected(self):
        with pytest.raises(InvalidInputError):
            self.make_cloud(bands=5)

    def test_opacities_are_sigmoid_of_logits(self):
        cloud = self.make_cloud()
        np.testing.assert_allclose(cloud.opacities(), sigmoid(cloud.opacity_logits))

    def test_copy_is_deep(self):
        cloud = self.make_cloud()
        dup = cloud.copy()
        dup.positions[0, 0] += 1.0
        assert cloud.positions[0, 0] != dup.positions[0, 0]

    def test_normalize_rotations(self):
        cloud = self.make_cloud()
        cloud.rotations *= 3.0
        cloud.normalize_rotations()
        np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0)

    def test_image_buffer_validates_shape(self):
        with pytest.raises(InvalidInputError):
            ImageBuffer(np.zeros((4, 4)))

    def test_image_buffer_rejects_nan(self):
        img = np.zeros((2, 2, 3))
        img[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            ImageBuffer(img)
