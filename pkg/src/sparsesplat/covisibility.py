"""Co-visibility redundancy elimination across aligned views.

Views are ranked by mean confidence; a lower-ranked view drops every pixel
whose surface point is already covered, at matching depth, by some strictly
higher-ranked view. The survivors seed one Gaussian per point.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySceneError, InvalidInputError
from .geometry import MAX_SH_DEGREE, SH_C0, GaussianCloud, logit, project_valid

DEFAULT_THETA = 0.01
INIT_OPACITY = 0.1
SCALE_NEIGHBORS = 3


@dataclass
class ViewRank:
    """Views ordered by mean confidence.

    Attributes:
        means: (V,) per-view arithmetic mean of the confidence map.
        order: (V,) view indices, descending mean, ties by ascending index.
    """

    means: np.ndarray
    order: np.ndarray


@dataclass
class VisibilityMask:
    """Per-view redundancy masks; True marks a pixel covered elsewhere."""

    masks: list

    def redundant_fraction(self, valid_masks):
        """Masked share of originally valid pixels, over all views."""
        masked = sum(int(np.count_nonzero(m)) for m in self.masks)
        valid = sum(int(np.count_nonzero(v)) for v in valid_masks)
        return masked / valid if valid else 0.0


def rank_views(conf_maps):
    """Rank views by mean confidence, most reliable first."""
    if len(conf_maps) == 0:
        raise InvalidInputError("no confidence maps to rank")
    means = np.empty(len(conf_maps))
    for i, conf in enumerate(conf_maps):
        arr = np.asarray(conf, dtype=np.float64)
        if arr.size == 0:
            raise InvalidInputError(f"view {i}: empty confidence map")
        means[i] = arr.mean()
    # Stable sort on the negated means: ties fall back to ascending index.
    order = np.argsort(-means, kind="stable")
    return ViewRank(means=means, order=order)


def cross_view_mask(geometry, rank, theta=DEFAULT_THETA):
    """Flag pixels whose depth is replicated by a strictly higher-ranked view.

    Views are processed from the most reliable downward. For view j, the
    surviving points of every view with a strictly higher mean confidence
    (their masks are already final) are projected into j; a valid pixel of
    j is redundant iff it is hit and the nearest projected depth matches
    its own depth to within ``theta`` relative tolerance. Unhit pixels and
    the top-ranked view always stay unmasked.

    Projecting survivors rather than raw points means every masked pixel
    cites a point that outlives the pruning, so the surviving set still
    covers it, and a second pass over the pruned maps is a no-op.
    """
    if np.isnan(theta) or theta < 0:
        raise InvalidInputError(f"theta must be nonnegative, got {theta}")
    n_views = len(geometry.cameras)
    masks = [np.zeros(conf.shape, dtype=bool) for conf in geometry.conf_maps]
    for j in rank.order:
        higher = [i for i in range(n_views) if rank.means[i] > rank.means[j]]
        if not higher:
            continue
        points = np.concatenate(
            [geometry.point_maps[i][geometry.valid_mask(i) & ~masks[i]] for i in higher]
        )
        if points.shape[0] == 0:
            continue
        uv, z, in_front = project_valid(geometry.cameras[j], points)
        h, w = masks[j].shape
        u = np.rint(uv[:, 0]).astype(np.int64)
        v = np.rint(uv[:, 1]).astype(np.int64)
        ok = in_front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        if not np.any(ok):
            continue
        nearest = np.full(h * w, np.inf)
        # Per-pixel minimum is order-free, so thread count cannot change it.
        np.minimum.at(nearest, v[ok] * w + u[ok], z[ok])
        nearest = nearest.reshape(h, w)
        hit = np.isfinite(nearest)
        d_orig = geometry.depth_maps[j]
        agree = np.abs(nearest - d_orig) < theta * d_orig
        masks[j] = hit & agree & geometry.valid_mask(j)
    return VisibilityMask(masks=masks)


def prune_and_init(geometry, visibility, images, sh_degree=0):
    """One Gaussian per surviving point, colored by its observed pixel.

    Positions are taken from the point maps untouched. The DC band inverts
    the renderer's color mapping so a degree-0 Gaussian reproduces its pixel
    exactly; higher bands start at zero. Scales are isotropic at the mean
    distance to the three nearest surviving neighbors.
    """
    if not 0 <= sh_degree <= MAX_SH_DEGREE:
        raise InvalidInputError(f"unsupported sh degree {sh_degree}")
    n_views = len(geometry.cameras)
    if len(visibility.masks) != n_views or len(images) != n_views:
        raise InvalidInputError("masks and images must cover every view")
    positions = []
    colors = []
    confidences = []
    for v in range(n_views):
        mask = np.asarray(visibility.masks[v], dtype=bool)
        keep = geometry.valid_mask(v) & ~mask
        if not np.any(keep):
            continue
        image = np.asarray(images[v], dtype=np.float64)
        if image.shape != keep.shape + (3,):
            raise InvalidInputError(f"view {v}: image shape {image.shape} mismatches maps")
        positions.append(geometry.point_maps[v][keep])
        colors.append(image[keep])
        confidences.append(geometry.conf_maps[v][keep])
    if not positions:
        raise EmptySceneError("pruning left no points to initialize")
    positions = np.concatenate(positions)
    colors = np.concatenate(colors)
    confidences = np.concatenate(confidences)
    n = positions.shape[0]
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = (colors - 0.5) / SH_C0
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    spacing = _mean_neighbor_distance(positions)
    return GaussianCloud(
        positions=positions,
        sh=sh,
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        rotations=rotations,
        log_scales=np.repeat(np.log(spacing)[:, None], 3, axis=1),
        confidences=confidences,
    )


def _mean_neighbor_distance(points):
    """Mean distance to the nearest surviving neighbors of each point."""
    n = points.shape[0]
    if n < 2:
        # A lone survivor has no neighbor; unit scale is as good as any.
        return np.ones(n)
    k = min(SCALE_NEIGHBORS + 1, n)
    distances, _ = cKDTree(points).query(points, k=k)
    mean = distances[:, 1:].mean(axis=1)
    positive = mean[mean > 0]
    if positive.size == 0:
        return np.ones(n)
    # Exact duplicates would put log scale at -inf; hand them the typical
    # spacing instead.
    return np.where(mean > 0, mean, np.median(positive))
