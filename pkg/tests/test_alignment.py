"""Graph construction, focal averaging, and global point-map alignment."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sparsesplat.alignment import (
    GlobalGeometry,
    align_global,
    average_focal,
    build_graph,
    extract_cameras,
    per_view_focals,
    _collect_sides,
    _init_views,
    _objective,
)
from sparsesplat.errors import (
    InsufficientViewsError,
    InvalidFocalError,
    InvalidInputError,
    OptimizationDivergedError,
)
from sparsesplat.geometry import Camera, project_valid, se3_exp
from sparsesplat.provider import PairwisePrediction, make_scene, synthesize_pairwise


def synthesize_all(scene, noise=0.0, seed=0, focal_jitter=0.0):
    graph = build_graph(len(scene))
    preds = {
        edge: synthesize_pairwise(scene, edge, noise, seed, focal_jitter=focal_jitter)
        for edge in graph.edges
    }
    return graph, preds


def relative_pose(cam_a, cam_b):
    """Pose of b in a's frame: (R, t) with x_a = R x_b + t."""
    Ra, ta = cam_a.rotation(), cam_a.t
    Rb, tb = cam_b.rotation(), cam_b.t
    return Ra.T @ Rb, Ra.T @ (tb - ta)


def rotation_angle(r):
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


class TestBuildGraph:
    @pytest.mark.parametrize("n,expected", [(2, 1), (3, 3), (12, 66)])
    def test_complete_edge_count(self, n, expected):
        graph = build_graph(n)
        assert len(graph.edges) == expected
        assert len(set(graph.edges)) == expected
        assert all(n_ < m for n_, m in graph.edges)

    def test_parameters_start_at_identity(self):
        graph = build_graph(4)
        assert np.array_equal(graph.edge_rotations[3], np.eye(3))
        assert np.all(graph.edge_translations == 0.0)
        assert np.all(graph.log_sigmas == 0.0)
        assert graph.sigma_product() == 1.0

    def test_too_few_views(self):
        with pytest.raises(InsufficientViewsError):
            build_graph(1)


class TestAverageFocal:
    def test_mean(self):
        assert average_focal([500.0, 520.0, 540.0]) == 520.0

    def test_single(self):
        assert average_focal([333.5]) == 333.5

    def test_constant(self):
        assert average_focal([600.0, 600.0, 600.0]) == 600.0

    def test_nonpositive_rejected(self):
        with pytest.raises(InvalidFocalError):
            average_focal([500.0, -1.0])
        with pytest.raises(InvalidFocalError):
            average_focal([500.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(InvalidFocalError):
            average_focal([])

    def test_per_view_collection(self):
        scene = make_scene(3, 32, 32, seed=1)
        graph, preds = synthesize_all(scene)
        focals = per_view_focals(graph, preds)
        assert len(focals) == 3
        # Noise-free estimates are exact, so the per-view means are exact.
        assert focals == [scene.cameras[i].focal for i in range(3)]


class TestObjectiveGradients:
    def _setup(self):
        scene = make_scene(2, 20, 20, seed=5)
        graph, preds = synthesize_all(scene, noise=0.02, seed=3)
        shape = preds[(0, 1)].shape
        focal = average_focal(per_view_focals(graph, preds))
        cam = Camera.centered(shape[1], shape[0], focal)
        rays = cam.pixel_rays().reshape(-1, 3)
        sides, _, _ = _collect_sides(graph, preds, rays, shape)
        rotations, centers, log_depths = _init_views(graph, preds, focal, cam.cx, cam.cy)
        # Nudge away from the optimum so gradients are non-trivial.
        rng = np.random.default_rng(11)
        rotations[1] = se3_exp(np.array([0.01, -0.02, 0.03, 0.02, 0.01, -0.015]))[0] @ rotations[1]
        log_depths[0] += 0.01 * rng.standard_normal(log_depths[0].shape)
        edge_rot = graph.edge_rotations.copy()
        edge_tr = graph.edge_translations.copy() + np.array([[0.01, 0.0, -0.02]])
        log_sigma = graph.log_sigmas.copy() + 0.05
        weight = float(sum(s.conf.sum() for s in sides))
        args = (sides, rotations, centers, log_depths, edge_rot, edge_tr, log_sigma, weight, shape)
        return args

    def test_analytic_gradients_match_finite_differences(self):
        args = self._setup()
        sides, rotations, centers, log_depths, edge_rot, edge_tr, log_sigma, weight, shape = args
        loss, g_depths, g_views, g_edges, g_sigma = _objective(*args)
        h = 1e-6

        def loss_at(rots, cents, lds, erot, etr, ls):
            return _objective(sides, rots, cents, lds, erot, etr, ls, weight, shape, with_grads=False)[0]

        for k in range(6):
            twist = np.zeros(6)
            twist[k] = h
            rp, tp = se3_exp(twist)
            rm, tm = se3_exp(-twist)
            lo = loss_at([rotations[0], rp @ rotations[1]], [centers[0], rp @ centers[1] + tp],
                         log_depths, edge_rot, edge_tr, log_sigma)
            hi = loss_at([rotations[0], rm @ rotations[1]], [centers[0], rm @ centers[1] + tm],
                         log_depths, edge_rot, edge_tr, log_sigma)
            fd = (lo - hi) / (2 * h)
            assert g_views[1, k] == pytest.approx(fd, rel=1e-5, abs=1e-10)

        rng = np.random.default_rng(7)
        flat = np.flatnonzero(np.isfinite(log_depths[0]))
        for i in rng.choice(flat, 5, replace=False):
            lp = [d.copy() for d in log_depths]
            lp[0][i] += h
            lm = [d.copy() for d in log_depths]
            lm[0][i] -= h
            fd = (loss_at(rotations, centers, lp, edge_rot, edge_tr, log_sigma)
                  - loss_at(rotations, centers, lm, edge_rot, edge_tr, log_sigma)) / (2 * h)
            assert g_depths[0][i] == pytest.approx(fd, rel=1e-5, abs=1e-12)

        for k in range(6):
            twist = np.zeros(6)
            twist[k] = h
            rp, tp = se3_exp(twist)
            rm, tm = se3_exp(-twist)
            fd = (loss_at(rotations, centers, log_depths, rp @ edge_rot, (rp @ edge_tr[0] + tp)[None],
                          log_sigma)
                  - loss_at(rotations, centers, log_depths, rm @ edge_rot, (rm @ edge_tr[0] + tm)[None],
                            log_sigma)) / (2 * h)
            assert g_edges[0, k] == pytest.approx(fd, rel=1e-5, abs=1e-10)

        fd = (loss_at(rotations, centers, log_depths, edge_rot, edge_tr, log_sigma + h)
              - loss_at(rotations, centers, log_depths, edge_rot, edge_tr, log_sigma - h)) / (2 * h)
        assert g_sigma[0] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestAlignGlobal:
    def test_single_edge_consistent_maps(self):
        scene = make_scene(2, 40, 40, seed=2)
        graph, preds = synthesize_all(scene)
        geom = align_global(graph, preds, iterations=40)
        assert geom.residual < 1e-10
        assert np.all(graph.log_sigmas == 0.0)
        assert graph.sigma_product() == 1.0
        cams = extract_cameras(geom)
        assert np.array_equal(cams[0].quat, [1.0, 0.0, 0.0, 0.0])
        assert np.array_equal(cams[0].t, np.zeros(3))

    def test_noise_free_recovers_relative_poses(self):
        scene = make_scene(3, 48, 48, seed=4)
        graph, preds = synthesize_all(scene)
        geom = align_global(graph, preds, iterations=60)
        cams = extract_cameras(geom)
        for v in range(1, 3):
            r_est, t_est = relative_pose(cams[0], cams[v])
            r_true, t_true = relative_pose(scene.cameras[0], scene.cameras[v])
            assert rotation_angle(r_est @ r_true.T) < 1e-4
            assert np.linalg.norm(t_est - t_true) < 1e-4 * scene.scale

    def test_point_maps_project_back_to_their_pixels(self):
        scene = make_scene(2, 32, 32, seed=6)
        graph, preds = synthesize_all(scene)
        geom = align_global(graph, preds, iterations=20)
        for v in range(2):
            valid = geom.valid_mask(v)
            vv, uu = np.nonzero(valid)
            uv, depth, ok = project_valid(geom.cameras[v], geom.point_maps[v][valid])
            assert np.all(ok)
            assert np.max(np.abs(uv[:, 0] - uu)) < 1e-8
            assert np.max(np.abs(uv[:, 1] - vv)) < 1e-8

    def test_final_residual_not_above_initial(self):
        scene = make_scene(3, 32, 32, seed=8)
        graph, preds = synthesize_all(scene, noise=0.05, seed=2)
        geom = align_global(graph, preds, iterations=80)
        assert geom.residual**2 <= geom.loss_trace[0] + 1e-15

    def test_doubled_confidences_reach_identical_parameters(self):
        scene = make_scene(2, 36, 36, seed=9)
        graph_a, preds = synthesize_all(scene, noise=0.03, seed=5)
        pred = preds[(0, 1)]
        # Work on a centered crop where every pixel carries geometry, so
        # doubling cannot flip any validity decision.
        crop = 12
        h, w = pred.shape
        sl = (slice(h // 2 - crop // 2, h // 2 + crop // 2), slice(w // 2 - crop // 2, w // 2 + crop // 2))

        def cropped(p, conf_scale):
            assert np.all(p.conf_src[sl] > 1.0) and np.all(p.conf_tgt[sl] > 1.0)
            return PairwisePrediction(
                p.edge,
                p.map_src[sl],
                p.map_tgt[sl],
                conf_scale * p.conf_src[sl],
                conf_scale * p.conf_tgt[sl],
                p.focal_estimate_n,
                p.focal_estimate_m,
            )

        graph_b = build_graph(2)
        geom_a = align_global(graph_a, {(0, 1): cropped(pred, 1.0)}, iterations=30)
        geom_b = align_global(graph_b, {(0, 1): cropped(pred, 2.0)}, iterations=30)
        assert np.array_equal(geom_a.cameras[1].quat, geom_b.cameras[1].quat)
        assert np.array_equal(geom_a.cameras[1].t, geom_b.cameras[1].t)
        assert np.array_equal(geom_a.depth_maps[0], geom_b.depth_maps[0])
        assert np.array_equal(graph_a.log_sigmas, graph_b.log_sigmas)

    def test_rigid_transform_of_all_maps_preserves_relative_poses(self):
        scene = make_scene(3, 32, 32, seed=10)
        graph_a, preds = synthesize_all(scene)
        rot = Rotation.from_rotvec([0.4, -0.2, 0.7]).as_matrix()
        shift = np.array([2.0, -1.0, 3.0])
        moved = {}
        for edge, p in preds.items():
            moved[edge] = PairwisePrediction(
                p.edge,
                p.map_src.astype(np.float64) @ rot.T + shift,
                p.map_tgt.astype(np.float64) @ rot.T + shift,
                p.conf_src,
                p.conf_tgt,
                p.focal_estimate_n,
                p.focal_estimate_m,
            )
        geom_a = align_global(graph_a, preds, iterations=60)
        geom_b = align_global(build_graph(3), moved, iterations=60)
        for v in range(1, 3):
            r_a, t_a = relative_pose(geom_a.cameras[0], geom_a.cameras[v])
            r_b, t_b = relative_pose(geom_b.cameras[0], geom_b.cameras[v])
            assert rotation_angle(r_a @ r_b.T) < 1e-6
            assert np.linalg.norm(t_a - t_b) < 1e-6 * scene.scale

    def test_scrambled_edges_recovered_under_product_one_gauge(self):
        scene = make_scene(3, 32, 32, seed=12)
        graph, preds = synthesize_all(scene)
        rng = np.random.default_rng(3)
        scales = rng.uniform(0.85, 1.2, size=3)
        scales[2] = 1.0 / (scales[0] * scales[1])
        scrambled = {}
        for k, (edge, p) in enumerate(sorted(preds.items())):
            rot = Rotation.from_rotvec(rng.uniform(-0.4, 0.4, 3)).as_matrix()
            shift = rng.uniform(-0.5, 0.5, 3) * scene.scale
            s = scales[k]
            scrambled[edge] = PairwisePrediction(
                p.edge,
                s * (p.map_src.astype(np.float64) @ rot.T) + shift,
                s * (p.map_tgt.astype(np.float64) @ rot.T) + shift,
                p.conf_src,
                p.conf_tgt,
                p.focal_estimate_n,
                p.focal_estimate_m,
            )
        geom = align_global(graph, scrambled, iterations=1500)
        assert geom.residual < 1e-5 * scene.scale
        assert abs(graph.sigma_product() - 1.0) < 1e-9
        cams = extract_cameras(geom)
        for v in range(1, 3):
            r_est, t_est = relative_pose(cams[0], cams[v])
            r_true, t_true = relative_pose(scene.cameras[0], scene.cameras[v])
            assert rotation_angle(r_est @ r_true.T) < 1e-4
            assert np.linalg.norm(t_est - t_true) < 1e-4 * scene.scale

    def test_missing_edge_rejected(self):
        scene = make_scene(3, 32, 32, seed=13)
        graph, preds = synthesize_all(scene)
        del preds[(1, 2)]
        with pytest.raises(InvalidInputError):
            align_global(graph, preds, iterations=5)

    def test_divergence_reports_iteration(self, monkeypatch):
        scene = make_scene(2, 24, 24, seed=14)
        graph, preds = synthesize_all(scene, noise=0.05, seed=1)
        # An absurd step size overflows the log-depths on the first update,
        # so the loss turns infinite on the next evaluation.
        monkeypatch.setattr("sparsesplat.alignment.cosine_lr", lambda *a: 1e300)
        with pytest.raises(OptimizationDivergedError) as err:
            align_global(graph, preds, iterations=5)
        assert err.value.iteration == 1

    def test_deterministic(self):
        scene = make_scene(2, 28, 28, seed=15)
        graph_a, preds = synthesize_all(scene, noise=0.02, seed=6)
        geom_a = align_global(graph_a, preds, iterations=25)
        geom_b = align_global(build_graph(2), preds, iterations=25)
        assert np.array_equal(geom_a.cameras[1].quat, geom_b.cameras[1].quat)
        assert np.array_equal(geom_a.point_maps[1], geom_b.point_maps[1])
        assert geom_a.residual == geom_b.residual
