"""Global fusion of pairwise point maps.

Builds the complete view graph, then jointly optimizes per-view poses and
depth maps together with per-edge similarity transforms so every prediction
agrees on one world geometry. The world frame is gauged to view 0's camera
(its pose is pinned to the identity) and the per-edge scales are kept at
product one by mean-centering their logs after every step.
"""

from dataclasses import dataclass, field

import numpy as np

from ._kernels import align_side_accumulate
from .errors import (
    InsufficientViewsError,
    InvalidFocalError,
    InvalidInputError,
    OptimizationDivergedError,
)
from .geometry import Camera, rotation_to_quat, se3_exp
from .optim import Adam, cosine_lr
from .provider import CONFIDENCE_FLOOR

ALIGN_ITERATIONS = 300
ALIGN_LR = 0.01
ALIGN_LR_FLOOR = 1e-4

# Closed-form pose init subsamples correspondences to this many points.
PNP_MAX_POINTS = 4096


@dataclass
class SceneGraph:
    """Complete view connectivity with per-edge similarity parameters."""

    n_views: int
    edges: list  # ordered (n, m) with n < m
    edge_rotations: np.ndarray  # (E, 3, 3)
    edge_translations: np.ndarray  # (E, 3)
    log_sigmas: np.ndarray  # (E,)

    def edge_index(self, edge):
        return self.edges.index(tuple(edge))

    def sigma_product(self):
        return float(np.exp(self.log_sigmas.sum()))


def build_graph(n_views):
    """Complete graph over the views, edge transforms at identity."""
    if n_views < 2:
        raise InsufficientViewsError(f"need at least 2 views, got {n_views}")
    edges = [(n, m) for n in range(n_views) for m in range(n + 1, n_views)]
    count = len(edges)
    return SceneGraph(
        n_views=n_views,
        edges=edges,
        edge_rotations=np.broadcast_to(np.eye(3), (count, 3, 3)).copy(),
        edge_translations=np.zeros((count, 3)),
        log_sigmas=np.zeros(count),
    )


@dataclass
class GlobalGeometry:
    """Fused output of global alignment.

    Point maps are parameterized as pose(depth * pixel ray), so projecting
    a view's own map through its camera lands back on the pixel grid.
    """

    cameras: list
    point_maps: list  # (H, W, 3) world points per view
    conf_maps: list  # (H, W) fused confidences, floor 1
    depth_maps: list  # (H, W) optimized camera-frame depths
    residual: float  # confidence-weighted RMS point distance
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def valid_mask(self, view):
        return self.conf_maps[view] > CONFIDENCE_FLOOR


def average_focal(estimates):
    """Arithmetic mean of per-view focal estimates, in pixels."""
    focals = np.asarray(estimates, dtype=np.float64)
    if focals.size == 0:
        raise InvalidFocalError("no focal estimates")
    if not np.all(np.isfinite(focals)) or np.any(focals <= 0):
        raise InvalidFocalError(f"focal estimates must be finite and positive: {focals}")
    return float(focals.mean())


def per_view_focals(graph, predictions):
    """Average each view's focal estimates over all edges mentioning it."""
    sums = np.zeros(graph.n_views)
    counts = np.zeros(graph.n_views)
    for n, m in graph.edges:
        pred = predictions[(n, m)]
        sums[n] += pred.focal_estimate_n
        counts[n] += 1
        sums[m] += pred.focal_estimate_m
        counts[m] += 1
    if np.any(counts == 0):
        raise InvalidInputError("some views appear in no edge")
    return list(sums / counts)


def extract_cameras(geometry):
    """Per-view cameras recovered by alignment; view 0 is the gauge origin."""
    cameras = list(geometry.cameras)
    first = cameras[0]
    if not (np.array_equal(first.quat, [1.0, 0.0, 0.0, 0.0]) and np.array_equal(first.t, np.zeros(3))):
        raise InvalidInputError("gauge violated: view 0 pose is not the identity")
    return cameras


def _pnp_pose(pixels, world, weights, focal, cx, cy):
    """Closed-form weighted DLT pose from 2D-3D correspondences.

    Returns camera-to-world (R, center). Correspondences must span a
    non-degenerate volume; intended for initialization only.
    """
    x = (pixels[:, 0] - cx) / focal
    y = (pixels[:, 1] - cy) / focal
    # Relative weights only; normalizing keeps the solve invariant to a
    # uniform rescaling of the confidences.
    weights = weights / weights.max()
    # Hartley-style conditioning on the world points.
    mu = world.mean(axis=0)
    spread = np.sqrt(np.mean(np.sum((world - mu) ** 2, axis=1)))
    if spread == 0.0 or not np.isfinite(spread):
        raise InvalidInputError("degenerate point set for pose initialization")
    w = (world - mu) / spread
    n = len(w)
    a = np.zeros((2 * n, 12))
    sw = np.sqrt(weights)
    a[0::2, 0:3] = w
    a[0::2, 3] = 1.0
    a[0::2, 8:11] = -x[:, None] * w
    a[0::2, 11] = -x
    a[1::2, 4:7] = w
    a[1::2, 7] = 1.0
    a[1::2, 8:11] = -y[:, None] * w
    a[1::2, 11] = -y
    a[0::2] *= sw[:, None]
    a[1::2] *= sw[:, None]
    _, _, vt = np.linalg.svd(a, full_matrices=False)
    p = vt[-1].reshape(3, 4)
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    u, s, vt3 = np.linalg.svd(p[:, :3])
    rot_wc = u @ vt3
    lam = s.mean()
    t_wc = p[:, 3] / lam
    # Undo the conditioning: x_cam = R (w_raw - mu)/spread + t.
    t_wc = t_wc - rot_wc @ mu / spread
    t_wc = t_wc * spread
    center = -rot_wc.T @ t_wc
    return rot_wc.T, center


@dataclass
class _Side:
    view: int
    edge_idx: int
    qmap: np.ndarray  # (M, 3) edge points in the edge frame
    conf: np.ndarray  # (M,)
    rays: np.ndarray  # (M, 3) pixel rays of the view at the shared focal
    flat_idx: np.ndarray  # (M,) indices into the view's flattened depth map


def align_global(graph, predictions, iterations=ALIGN_ITERATIONS, seed=0):
    """Jointly fit per-view poses/depths and per-edge similarities.

    The objective is the confidence-weighted mean squared distance between
    each view's parameterized world points and its per-edge transformed
    prediction; the reported residual is the weighted RMS distance. The best
    iterate wins, so the result never regresses below the initialization.
    """
    del seed  # The solve is deterministic; the argument fixes the interface.
    n_views = graph.n_views
    for edge in graph.edges:
        if edge not in predictions:
            raise InvalidInputError(f"missing prediction for edge {edge}")
    shape = predictions[graph.edges[0]].shape
    height, width = shape
    focal = average_focal(per_view_focals(graph, predictions))
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0

    base = Camera.centered(width, height, focal)
    rays_full = base.pixel_rays().reshape(-1, 3)

    sides, conf_sums, conf_counts = _collect_sides(graph, predictions, rays_full, shape)
    seen = {s.view for s in sides}
    if seen != set(range(n_views)):
        raise InvalidInputError(f"views {sorted(set(range(n_views)) - seen)} have no valid pixels")
    weight_total = float(sum(s.conf.sum() for s in sides))

    raw_rotations, raw_centers, log_depths = _init_views(graph, predictions, focal, cx, cy)
    # Camera-frame depths are rigid-invariant, so the re-gauge that pins
    # view 0 to the identity leaves them untouched.
    rotations, centers = _regauge(raw_rotations, raw_centers)

    edge_rot, edge_tr, log_sigma = _init_edges(
        graph, sides, rotations, centers, log_depths, rays_full
    )
    _project_scale_gauge(log_sigma, log_depths, centers)

    adam = Adam()
    trace = np.zeros(iterations)
    best = None
    best_loss = np.inf

    for it in range(iterations):
        loss, g_depths, g_views, g_edges, g_sigma = _objective(
            sides, rotations, centers, log_depths, edge_rot, edge_tr, log_sigma, weight_total, shape
        )
        if not np.isfinite(loss):
            raise OptimizationDivergedError(
                f"alignment loss became non-finite at iteration {it}", iteration=it
            )
        trace[it] = loss
        if loss < best_loss:
            best_loss = loss
            best = (
                [r.copy() for r in rotations],
                [c.copy() for c in centers],
                [d.copy() for d in log_depths],
                edge_rot.copy(),
                edge_tr.copy(),
                log_sigma.copy(),
            )
        lr = cosine_lr(it, iterations, ALIGN_LR, ALIGN_LR_FLOOR)
        for v in range(1, n_views):
            delta = np.zeros(6)
            adam.step(("view", v), delta, g_views[v], lr)
            rot_d, t_d = se3_exp(delta)
            rotations[v] = rot_d @ rotations[v]
            centers[v] = rot_d @ centers[v] + t_d
        for v in range(n_views):
            adam.step(("depth", v), log_depths[v], g_depths[v], lr)
        for e in range(len(graph.edges)):
            delta = np.zeros(6)
            adam.step(("edge", e), delta, g_edges[e], lr)
            rot_d, t_d = se3_exp(delta)
            edge_rot[e] = rot_d @ edge_rot[e]
            edge_tr[e] = rot_d @ edge_tr[e] + t_d
        adam.step("sigma", log_sigma, g_sigma, lr)
        _project_scale_gauge(log_sigma, log_depths, centers)

    if best is not None:
        rotations, centers, log_depths, edge_rot, edge_tr, log_sigma = best

    final_loss, _, _, _, _ = _objective(
        sides,
        rotations,
        centers,
        log_depths,
        edge_rot,
        edge_tr,
        log_sigma,
        weight_total,
        shape,
        with_grads=False,
    )
    graph.edge_rotations = edge_rot
    graph.edge_translations = edge_tr
    graph.log_sigmas = log_sigma

    cameras = []
    point_maps = []
    depth_maps = []
    conf_maps = []
    for v in range(n_views):
        quat = rotation_to_quat(rotations[v])
        if v == 0:
            quat = np.array([1.0, 0.0, 0.0, 0.0])
        cameras.append(Camera(width, height, focal, cx, cy, quat, centers[v].copy()))
        depth = np.exp(log_depths[v]).reshape(shape)
        pts = (rays_full * depth.reshape(-1)[:, None]) @ rotations[v].T + centers[v]
        point_maps.append(pts.reshape(height, width, 3))
        depth_maps.append(depth)
        conf = np.where(conf_counts[v] > 0, conf_sums[v] / np.maximum(conf_counts[v], 1), CONFIDENCE_FLOOR)
        conf_maps.append(np.maximum(conf, CONFIDENCE_FLOOR))
    return GlobalGeometry(
        cameras=cameras,
        point_maps=point_maps,
        conf_maps=conf_maps,
        depth_maps=depth_maps,
        residual=float(np.sqrt(final_loss)),
        loss_trace=trace,
    )


def _collect_sides(graph, predictions, rays_full, shape):
    sides = []
    conf_sums = [np.zeros(shape) for _ in range(graph.n_views)]
    conf_counts = [np.zeros(shape, dtype=np.int64) for _ in range(graph.n_views)]
    for eidx, (n, m) in enumerate(graph.edges):
        pred = predictions[(n, m)]
        if pred.shape != shape:
            raise InvalidInputError("all predictions must share one resolution")
        for view, pts, conf in (
            (n, pred.map_src, pred.conf_src),
            (m, pred.map_tgt, pred.conf_tgt),
        ):
            c64 = conf.astype(np.float64)
            conf_sums[view] += c64
            conf_counts[view] += 1
            valid = c64 > CONFIDENCE_FLOOR
            if not np.any(valid):
                continue
            flat = np.flatnonzero(valid.reshape(-1))
            sides.append(
                _Side(
                    view=view,
                    edge_idx=eidx,
                    qmap=np.ascontiguousarray(pts.reshape(-1, 3)[flat], dtype=np.float64),
                    conf=np.ascontiguousarray(c64.reshape(-1)[flat]),
                    rays=np.ascontiguousarray(rays_full[flat]),
                    flat_idx=flat,
                )
            )
    return sides, conf_sums, conf_counts


def _solve_view_pose(points, conf, focal, cx, cy, view):
    """Weighted DLT pose of one view from its pixel-aligned point map."""
    valid = conf > CONFIDENCE_FLOOR
    vv, uu = np.nonzero(valid)
    if len(vv) < 6:
        raise InvalidInputError(f"view {view}: too few valid pixels to initialize a pose")
    step = max(1, len(vv) // PNP_MAX_POINTS)
    sel = slice(None, None, step)
    pixels = np.stack([uu[sel].astype(np.float64), vv[sel].astype(np.float64)], axis=1)
    return _pnp_pose(pixels, points[valid][sel], conf[valid][sel], focal, cx, cy)


def _log_depth_along_rays(points, conf, rotation, center):
    """Per-pixel log depth of a pixel-aligned map under the matching pose."""
    pts = (points.reshape(-1, 3).astype(np.float64) - center) @ rotation
    valid = conf.reshape(-1).astype(np.float64) > CONFIDENCE_FLOOR
    z = pts[:, 2]
    positive = z[valid & (z > 0)]
    fallback = float(np.median(positive)) if positive.size else 1.0
    floor = 1e-3 * fallback
    depth = np.where(valid & (z > floor), z, fallback)
    return np.log(depth)


def _init_views(graph, predictions, focal, cx, cy):
    """Frame-consistent per-view poses and depths from the star around view 0.

    Each edge's maps live in their own similarity frame. The first edge's
    frame becomes the working frame: views 0 and 1 are solved there directly,
    and every other view v is solved inside edge (0, v)'s frame, then carried
    over by the similarity fitted between that edge's view-0 points and the
    working frame's view-0 points (pixel-aligned at view 0 on both sides).
    Without the hand-off the initial views disagree about scale and
    orientation whenever the edges do, and the optimizer starts from a
    contradiction it can take thousands of steps to unwind.
    """
    n_views = graph.n_views
    ref = predictions[graph.edges[0]]
    rotations = [None] * n_views
    centers = [None] * n_views
    log_depths = [None] * n_views
    rotations[0], centers[0] = _solve_view_pose(ref.map_src, ref.conf_src, focal, cx, cy, 0)
    log_depths[0] = _log_depth_along_rays(ref.map_src, ref.conf_src, rotations[0], centers[0])
    rotations[1], centers[1] = _solve_view_pose(ref.map_tgt, ref.conf_tgt, focal, cx, cy, 1)
    log_depths[1] = _log_depth_along_rays(ref.map_tgt, ref.conf_tgt, rotations[1], centers[1])
    ref_points = ref.map_src.reshape(-1, 3).astype(np.float64)
    ref_conf = ref.conf_src.reshape(-1).astype(np.float64)
    for v in range(2, n_views):
        pred = predictions[(0, v)]
        rot_e, ctr_e = _solve_view_pose(pred.map_tgt, pred.conf_tgt, focal, cx, cy, v)
        logd_e = _log_depth_along_rays(pred.map_tgt, pred.conf_tgt, rot_e, ctr_e)
        src_points = pred.map_src.reshape(-1, 3).astype(np.float64)
        src_conf = pred.conf_src.reshape(-1).astype(np.float64)
        joint = (src_conf > CONFIDENCE_FLOOR) & (ref_conf > CONFIDENCE_FLOOR)
        fit = None
        if np.count_nonzero(joint) >= 3:
            fit = _weighted_similarity(
                src_points[joint], ref_points[joint], src_conf[joint] * ref_conf[joint]
            )
        if fit is None:
            # Too little shared view-0 support to bridge frames; keep the
            # edge-frame solution and let the optimizer absorb the offset.
            rotations[v], centers[v], log_depths[v] = rot_e, ctr_e, logd_e
            continue
        scale, rot, shift = fit
        rotations[v] = rot @ rot_e
        centers[v] = scale * rot @ ctr_e + shift
        # Camera-frame depths scale with the frame hand-off.
        log_depths[v] = logd_e + np.log(scale)
    return rotations, centers, log_depths


def _regauge(rotations, centers):
    """Left-compose every pose with the inverse of view 0's, pinning the gauge."""
    rot0, c0 = rotations[0], centers[0]
    out_r = [np.eye(3)]
    out_c = [np.zeros(3)]
    for v in range(1, len(rotations)):
        out_r.append(rot0.T @ rotations[v])
        out_c.append(rot0.T @ (centers[v] - c0))
    return out_r, out_c


def _weighted_similarity(source, target, weights):
    """Weighted least-squares similarity: target ~ s R source + t."""
    w = weights / weights.sum()
    mu_s = w @ source
    mu_t = w @ target
    src_c = source - mu_s
    dst_c = target - mu_t
    var_s = float(w @ np.sum(src_c**2, axis=1))
    if var_s == 0.0 or not np.isfinite(var_s):
        return None
    cov = dst_c.T @ (src_c * w[:, None])
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum() / var_s)
    if scale <= 0.0 or not np.isfinite(scale):
        return None
    shift = mu_t - scale * rot @ mu_s
    return scale, rot, shift


def _init_edges(graph, sides, rotations, centers, log_depths, rays_full):
    """Closed-form per-edge similarity warm start against the initial geometry.

    An edge frame generally differs from the gauge frame, so starting its
    transform at the identity strands the optimizer far from any consistent
    configuration; fitting the similarity to the initialized point maps keeps
    consistent inputs at zero residual from the first step.
    """
    n_edges = len(graph.edges)
    edge_rot = graph.edge_rotations.copy()
    edge_tr = graph.edge_translations.copy()
    log_sigma = graph.log_sigmas.copy()
    points = []
    for v in range(len(rotations)):
        pts = (rays_full * np.exp(log_depths[v])[:, None]) @ rotations[v].T + centers[v]
        points.append(pts)
    for eidx in range(n_edges):
        source = []
        target = []
        weights = []
        for side in sides:
            if side.edge_idx != eidx:
                continue
            source.append(side.qmap)
            target.append(points[side.view][side.flat_idx])
            weights.append(side.conf)
        if not source:
            continue
        fit = _weighted_similarity(
            np.concatenate(source), np.concatenate(target), np.concatenate(weights)
        )
        if fit is None:
            continue
        scale, rot, shift = fit
        edge_rot[eidx] = rot
        edge_tr[eidx] = shift / scale
        log_sigma[eidx] = np.log(scale)
    return edge_rot, edge_tr, log_sigma


def _project_scale_gauge(log_sigma, log_depths, centers):
    """Force a product-one edge scale by rescaling the whole frame.

    Shifting every log scale is a pure gauge move only when the depths and
    camera centers absorb the same factor; recentering the scales alone
    tears an otherwise consistent configuration apart.
    """
    shift = log_sigma.mean()
    if shift == 0.0:
        return
    log_sigma -= shift
    factor = np.exp(-shift)
    for v in range(len(log_depths)):
        log_depths[v] -= shift
        centers[v] = centers[v] * factor


def _objective(
    sides,
    rotations,
    centers,
    log_depths,
    edge_rot,
    edge_tr,
    log_sigma,
    weight_total,
    shape,
    with_grads=True,
):
    n_views = len(rotations)
    n_edges = len(edge_rot)
    loss = 0.0
    g_depths = [np.zeros(shape[0] * shape[1]) for _ in range(n_views)] if with_grads else None
    g_views = np.zeros((n_views, 6))
    g_edges = np.zeros((n_edges, 7))
    scratch_view = np.zeros(6)
    for side in sides:
        depths = np.exp(log_depths[side.view][side.flat_idx])
        g_depth_local = np.zeros(len(side.flat_idx))
        scratch_view[:] = 0.0
        g_edge_local = np.zeros(7)
        loss += align_side_accumulate(
            side.qmap,
            side.conf,
            side.rays,
            depths,
            rotations[side.view],
            centers[side.view],
            edge_rot[side.edge_idx],
            edge_tr[side.edge_idx],
            float(np.exp(log_sigma[side.edge_idx])),
            g_depth_local,
            scratch_view,
            g_edge_local,
        )
        if with_grads:
            g_depths[side.view][side.flat_idx] += g_depth_local
            g_views[side.view] += scratch_view
            g_edges[side.edge_idx] += g_edge_local
    loss /= weight_total
    if not with_grads:
        return loss, None, None, None, None
    for v in range(n_views):
        g_depths[v] /= weight_total
    g_views /= weight_total
    g_edges /= weight_total
    g_sigma = g_edges[:, 6].copy()
    return loss, g_depths, g_views, g_edges[:, :6], g_sigma
