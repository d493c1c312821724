"""Tile-based differentiable rasterizer.

render_forward composites a Gaussian cloud front-to-back into an image;
render_backward turns per-pixel loss gradients into analytic gradients for
every Gaussian parameter, the camera pose twist, and the focal length. The
backward pass replays the forward pass's binning and per-pixel termination
bounds, so the two passes always see the same contributor sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractViolationError, RenderError
from .geometry import (
    Camera,
    GaussianCloud,
    ImageBuffer,
    Z_NEAR,
    build_covariance,
)

# Screen-space covariance dilation in px^2, shared with the kernels.
LOW_PASS = _kernels.LOW_PASS
TILE_SIZE = _kernels.TILE_SIZE


@dataclass
class RenderGradients:
    """Analytic gradients of a scalar pixel loss.

    d_rotation lives in the tangent space of the unit-quaternion manifold
    (orthogonal to the current quaternion); d_pose_twist is the 6-vector
    [v, w] gradient of a left-multiplied se3 update at the current pose.
    """

    d_position: np.ndarray
    d_sh: np.ndarray
    d_opacity_logit: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_pose_twist: np.ndarray
    d_focal: float


@dataclass
class _RenderContext:
    """Forward-pass state replayed by the backward pass."""

    n: int
    degree: int
    camera: Camera
    background: np.ndarray
    fingerprint: tuple
    pcam: np.ndarray
    mu: np.ndarray
    conic: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    radius: np.ndarray
    qmax: np.ndarray
    basis: np.ndarray
    clamped: np.ndarray
    pair_gauss: np.ndarray
    tile_starts: np.ndarray
    tile_ends: np.ndarray
    packed: np.ndarray
    stride: int
    final_trans: np.ndarray
    last_idx: np.ndarray


@dataclass
class RenderOutput:
    """Composited image plus per-pixel auxiliaries.

    rgb = composited color + (1 - accumulated_alpha) * background, with
    accumulated_alpha in [0, 1] at every pixel.
    """

    rgb: ImageBuffer
    expected_depth: np.ndarray
    accumulated_alpha: np.ndarray
    contributor_counts: np.ndarray
    _ctx: _RenderContext | None = field(default=None, repr=False)


def _as_background(background):
    if background is None:
        return np.zeros(3, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(bg)):
        raise RenderError("background color must be finite")
    return bg.copy()


def _check_finite(cloud):
    """Reject non-finite parameters, naming the first offending Gaussian."""
    if len(cloud) == 0:
        return
    for name, arr in (
        ("position", cloud.positions),
        ("sh", cloud.sh),
        ("opacity_logit", cloud.opacity_logits),
        ("rotation", cloud.rotations),
        ("log_scale", cloud.log_scales),
    ):
        flat = np.isfinite(arr).reshape(len(cloud), -1).all(axis=1)
        if not flat.all():
            idx = int(np.argmin(flat))
            raise RenderError(
                f"non-finite {name} on Gaussian {idx}", gaussian_index=idx
            )


def _fingerprint(cloud, camera):
    """Cheap input digest; detects most forward/backward input mismatches."""
    return (
        len(cloud),
        cloud.sh.shape[1],
        float(cloud.positions.sum()),
        float(cloud.sh.sum()),
        float(cloud.opacity_logits.sum()),
        float(cloud.rotations.sum()),
        float(cloud.log_scales.sum()),
        camera.width,
        camera.height,
        float(camera.focal),
        float(camera.cx),
        float(camera.cy),
        tuple(camera.quat.tolist()),
        tuple(camera.t.tolist()),
    )


def _c64(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def _aligned_rows(n_rows, n_cols, dtype):
    """Zeroed (n_rows, n_cols) array whose first row sits on a 64-byte
    boundary, so each padded row occupies whole cache lines."""
    itemsize = np.dtype(dtype).itemsize
    pad = 64 // itemsize
    buf = np.zeros(n_rows * n_cols + pad, dtype=dtype)
    off = (-buf.ctypes.data // itemsize) % pad
    return buf[off:off + n_rows * n_cols].reshape(n_rows, n_cols)


def project_gaussian_2d(camera, cloud, index=0):
    """Project one Gaussian into screen space.

    Returns:
        (mean2d, cov2d, depth) with cov2d the 2x2 screen-space covariance in
        px^2 including the low-pass dilation, or None when the center is at
        or behind the near plane (culled).
    """
    pos = cloud.positions[index]
    r_wc, t_wc = camera.world_to_camera()
    p = r_wc @ pos + t_wc
    z = float(p[2])
    if z <= Z_NEAR:
        return None
    cov_cam = r_wc @ build_covariance(cloud.rotations[index], cloud.log_scales[index]) @ r_wc.T
    f = camera.focal
    jac = np.array(
        [
            [f / z, 0.0, -f * p[0] / z**2],
            [0.0, f / z, -f * p[1] / z**2],
        ]
    )
    cov2 = jac @ cov_cam @ jac.T + LOW_PASS * np.eye(2)
    mean2d = np.array([camera.cx + f * p[0] / z, camera.cy + f * p[1] / z])
    return mean2d, cov2, z


def render_forward(cloud, camera, background=None, *, precision="double",
                   pixel_stride=1):
    """Rasterize the cloud through the camera.

    Gaussians are depth-sorted globally (stable, ties by index), binned to
    16x16 tiles by their footprint radius, and composited front-to-back with
    weight clip 0.99, skip threshold 1e-4, and termination transmittance
    1e-4. The footprint radius is wide enough that binning never excludes a
    Gaussian whose weight would pass the skip test, so the tiled result
    matches a brute-force per-pixel evaluation.

    precision "double" composites in f64; "single" composites in f32 (the
    projection stage stays f64 either way). pixel_stride > 1 evaluates only
    pixels whose x and y coordinates are both multiples of the stride; those
    pixels get exactly the values a full render would give them, and every
    other pixel holds the background color with zero accumulated alpha.

    Raises:
        RenderError: any non-finite Gaussian parameter (the error names the
            offending index) or non-finite background.
    """
    if precision not in ("double", "single"):
        raise ContractViolationError(f"unknown precision {precision!r}")
    stride = int(pixel_stride)
    if stride < 1:
        raise ContractViolationError("pixel_stride must be >= 1")
    dtype = np.float64 if precision == "double" else np.float32
    bg = _as_background(background)
    _check_finite(cloud)
    n = len(cloud)
    h, w = camera.height, camera.width
    degree = cloud.sh_degree
    nb = (degree + 1) ** 2

    pcam = np.zeros((n, 3))
    mu = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    alpha = np.zeros(n)
    color = np.zeros((n, 3))
    radius = np.zeros(n)
    depth = np.zeros(n)
    basis = np.zeros((n, nb))
    clamped = np.zeros((n, 3), dtype=np.uint8)

    r_wc, t_wc = camera.world_to_camera()
    _kernels.geometry_forward(
        _c64(cloud.positions),
        _c64(cloud.rotations),
        _c64(cloud.log_scales),
        _c64(cloud.sh),
        _c64(cloud.opacity_logits),
        degree,
        _c64(r_wc),
        _c64(t_wc),
        _c64(camera.t),
        float(camera.focal),
        float(camera.cx),
        float(camera.cy),
        Z_NEAR,
        w,
        h,
        pcam,
        mu,
        conic,
        alpha,
        color,
        radius,
        depth,
        basis,
        clamped,
    )

    order = np.argsort(depth, kind="stable")
    tile_counts = _kernels.count_tiles(mu, radius, w, h)
    pair_gauss, tile_starts, tile_ends = _kernels.build_pairs(
        order, mu, radius, w, h, tile_counts
    )

    # Quadratic-form value beyond which the weight provably fails the skip
    # test; the margin keeps the precheck conservative under roundoff.
    with np.errstate(divide="ignore", invalid="ignore"):
        qmax = np.where(
            alpha > _kernels.SKIP_WEIGHT,
            2.0 * np.log(np.maximum(alpha, 1e-300) / _kernels.SKIP_WEIGHT) + 0.01,
            0.0,
        )

    packed = _aligned_rows(pair_gauss.shape[0], _kernels.PACK_COLS, dtype)
    _kernels.pack_pairs(
        pair_gauss, mu, conic, alpha, qmax, radius, color, depth, packed
    )

    bg_k = bg.astype(dtype)
    out_rgb = np.empty((h, w, 3), dtype=dtype)
    out_rgb[:] = bg_k
    out_trans = np.ones((h, w), dtype=dtype)
    out_depth = np.zeros((h, w), dtype=dtype)
    out_ncontrib = np.zeros((h, w), dtype=np.int32)
    out_last = np.zeros((h, w), dtype=np.int64)
    splat = (
        _kernels.forward_splat if dtype is np.float64
        else _kernels.forward_splat32
    )
    splat(
        packed,
        tile_starts,
        tile_ends,
        w,
        h,
        stride,
        bg_k,
        out_rgb,
        out_trans,
        out_depth,
        out_ncontrib,
        out_last,
    )

    ctx = _RenderContext(
        n=n,
        degree=degree,
        camera=camera,
        background=bg,
        fingerprint=_fingerprint(cloud, camera),
        pcam=pcam,
        mu=mu,
        conic=conic,
        alpha=alpha,
        color=color,
        radius=radius,
        qmax=qmax,
        basis=basis,
        clamped=clamped,
        pair_gauss=pair_gauss,
        tile_starts=tile_starts,
        tile_ends=tile_ends,
        packed=packed,
        stride=stride,
        final_trans=out_trans,
        last_idx=out_last,
    )
    return RenderOutput(
        rgb=ImageBuffer(out_rgb),
        expected_depth=np.asarray(out_depth, dtype=np.float64),
        accumulated_alpha=1.0 - np.asarray(out_trans, dtype=np.float64),
        contributor_counts=out_ncontrib,
        _ctx=ctx,
    )


def render_backward(cloud, camera, output, dloss_drgb):
    """Backpropagate per-pixel loss gradients through the rasterizer.

    Args:
        cloud, camera: the exact inputs given to render_forward.
        output: the RenderOutput returned by that forward pass.
        dloss_drgb: (H, W, 3) gradient of the scalar loss w.r.t. the
            composited image. When the forward pass used a pixel stride,
            entries at unsampled pixels are ignored.

    Raises:
        ContractViolationError: output lacks forward state or the inputs do
            not match the ones the forward pass saw.
    """
    ctx = output._ctx
    if ctx is None:
        raise ContractViolationError("output carries no forward state")
    if ctx.fingerprint != _fingerprint(cloud, camera):
        raise ContractViolationError("forward/backward inputs differ")
    h, w = camera.height, camera.width
    dl = _c64(dloss_drgb)
    if dl.shape != (h, w, 3):
        raise ContractViolationError(
            f"dloss_drgb shape {dl.shape} does not match image ({h}, {w}, 3)"
        )
    if not np.all(np.isfinite(dl)):
        raise ContractViolationError("dloss_drgb contains non-finite values")

    n = ctx.n
    nb = (ctx.degree + 1) ** 2
    d_pos = np.zeros((n, 3))
    d_sh = np.zeros((n, nb, 3))
    d_logit = np.zeros(n)
    d_quat = np.zeros((n, 4))
    d_logscale = np.zeros((n, 3))
    g_pose = np.zeros(7)

    if n > 0 and ctx.pair_gauss.shape[0] > 0:
        n_pairs = ctx.pair_gauss.shape[0]
        dtype = ctx.packed.dtype
        pair_grads = _aligned_rows(n_pairs, _kernels.GRAD_COLS, dtype)
        splat = (
            _kernels.backward_splat if dtype == np.float64
            else _kernels.backward_splat32
        )
        splat(
            ctx.packed,
            ctx.tile_starts,
            ctx.tile_ends,
            w,
            h,
            ctx.stride,
            ctx.background.astype(dtype),
            ctx.final_trans,
            ctx.last_idx,
            dl.astype(dtype, copy=False),
            pair_grads,
        )
        g_dmu = np.zeros((n, 2))
        g_dconic = np.zeros((n, 3))
        g_dalpha = np.zeros(n)
        g_dcolor = np.zeros((n, 3))
        _kernels.merge_pair_grads(
            ctx.pair_gauss,
            pair_grads,
            g_dmu,
            g_dconic,
            g_dalpha,
            g_dcolor,
        )
        r_wc, t_wc = camera.world_to_camera()
        _kernels.geometry_backward(
            _c64(cloud.positions),
            _c64(cloud.rotations),
            _c64(cloud.log_scales),
            _c64(cloud.sh),
            ctx.degree,
            _c64(r_wc),
            _c64(t_wc),
            _c64(camera.t),
            float(camera.focal),
            ctx.pcam,
            ctx.conic,
            ctx.alpha,
            ctx.basis,
            ctx.clamped,
            ctx.radius,
            g_dmu,
            g_dconic,
            g_dalpha,
            g_dcolor,
            d_pos,
            d_sh,
            d_logit,
            d_quat,
            d_logscale,
            g_pose,
        )

    return RenderGradients(
        d_position=d_pos,
        d_sh=d_sh,
        d_opacity_logit=d_logit,
        d_rotation=d_quat,
        d_log_scale=d_logscale,
        d_pose_twist=g_pose[:6].copy(),
        d_focal=float(g_pose[6]),
    )
