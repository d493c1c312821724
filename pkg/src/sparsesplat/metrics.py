"""Evaluation metrics: PSNR, SSIM, similarity-aligned trajectory error, and
median-normalized depth metrics.

SSIM follows the canonical single-scale formulation (11x11 Gaussian window,
sigma 1.5, K1=0.01, K2=0.03, dynamic range 1.0) with valid-mode windowing,
averaged over channels. The gradient variant backs the optional D-SSIM term
in the photometric objective.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import DegenerateAlignmentError, InvalidInputError
from .geometry import as_rgb, quat_to_rotation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_HALF = SSIM_WINDOW // 2


def _window():
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - _HALF
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_W1D = _window()


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over [0, 1] images.

    Returns inf for identical images.
    """
    a = as_rgb(a)
    b = as_rgb(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


def _filter_valid(img):
    """Separable Gaussian correlation, cropped to fully-supported pixels."""
    out = convolve1d(img, _W1D, axis=0, mode="constant")
    out = convolve1d(out, _W1D, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(grad, height, width):
    """Adjoint of _filter_valid: scatter interior values through the window."""
    full = np.zeros((height, width), dtype=np.float64)
    full[_HALF:-_HALF, _HALF:-_HALF] = grad
    full = convolve1d(full, _W1D, axis=0, mode="constant")
    return convolve1d(full, _W1D, axis=1, mode="constant")


def _ssim_channel(x, y, with_grad):
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    s_xx = _filter_valid(x * x) - mu_x * mu_x
    s_yy = _filter_valid(y * y) - mu_y * mu_y
    s_xy = _filter_valid(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * s_xy + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = s_xx + s_yy + c2
    smap = (a1 * a2) / (b1 * b2)
    if not with_grad:
        return float(smap.mean()), None
    # Partials of the per-window score wrt (mu_x, s_xx, s_xy); chain back
    # through the filters with the adjoint operator.
    n = smap.size
    d_mu = (2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * smap / b1) / n
    d_sxx = (-smap / b2) / n
    d_sxy = (2.0 * a1 / (b1 * b2)) / n
    h, w = x.shape
    grad = _filter_adjoint(d_mu - 2.0 * mu_x * d_sxx - mu_y * d_sxy, h, w)
    grad += 2.0 * x * _filter_adjoint(d_sxx, h, w)
    grad += y * _filter_adjoint(d_sxy, h, w)
    return float(smap.mean()), grad


def ssim(a, b):
    """Mean structural similarity, channel-averaged; 1.0 for identical images."""
    score, _ = ssim_with_gradient(a, b, with_grad=False)
    return score


def ssim_with_gradient(a, b, with_grad=True):
    """SSIM plus the analytic gradient of the score with respect to ``a``.

    Returns:
        (score, grad) where grad has a's shape, or (score, None) when
        with_grad is false.
    """
    a = as_rgb(a)
    b = as_rgb(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidInputError(
            f"images must be at least {SSIM_WINDOW} px on each side for SSIM"
        )
    scores = []
    grad = np.zeros_like(a) if with_grad else None
    for c in range(3):
        score_c, grad_c = _ssim_channel(a[:, :, c], b[:, :, c], with_grad)
        scores.append(score_c)
        if with_grad:
            grad[:, :, c] = grad_c
    if with_grad:
        grad /= 3.0
    return float(np.mean(scores)), grad


@dataclass
class Trajectory:
    """Ordered camera trajectory: per-view ids, rotations, and positions."""

    ids: list
    rotations: np.ndarray  # (M, 3, 3) world-from-camera rotations
    translations: np.ndarray  # (M, 3) camera centers

    def __post_init__(self):
        self.ids = list(self.ids)
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("trajectory ids must be unique")
        m = len(self.ids)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(m, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(m, 3)

    @classmethod
    def from_cameras(cls, ids, cameras):
        return cls(
            ids,
            np.stack([quat_to_rotation(c.quat) for c in cameras]),
            np.stack([c.t for c in cameras]),
        )

    def __len__(self):
        return len(self.ids)


@dataclass
class AteReport:
    """Similarity-aligned trajectory error."""

    rmse: float
    rotation_errors: np.ndarray  # (M,) geodesic angles in radians
    scale: float


def umeyama_alignment(source, target, fix_scale=False):
    """Closed-form least-squares similarity aligning source onto target.

    Returns:
        (s, R, t) minimizing sum ||target_i - (s R source_i + t)||^2.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_d
    var_s = float((src_c**2).sum() / len(src))
    if var_s == 0.0:
        raise DegenerateAlignmentError("source translations are all identical")
    cov = dst_c.T @ src_c / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = 1.0 if fix_scale else float((d * sign).sum() / var_s)
    if scale <= 0.0 or not np.isfinite(scale):
        raise DegenerateAlignmentError(f"alignment produced scale {scale}")
    shift = mu_d - scale * rot @ mu_s
    return scale, rot, shift


def ate(estimated, reference, fix_scale=False):
    """Absolute trajectory error after closed-form similarity alignment.

    Aligns the estimated camera centers onto the reference, then reports the
    RMSE of the aligned translation residuals and per-pose geodesic rotation
    errors.
    """
    if estimated.ids != reference.ids:
        raise InvalidInputError("trajectories must cover the same view ids in order")
    m = len(estimated)
    needed = 2 if fix_scale else 3
    if m < needed:
        raise InvalidInputError(f"need at least {needed} poses, got {m}")
    scale, rot, shift = umeyama_alignment(
        estimated.translations, reference.translations, fix_scale=fix_scale
    )
    aligned = scale * estimated.translations @ rot.T + shift
    rmse = float(np.sqrt(np.mean(np.sum((aligned - reference.translations) ** 2, axis=1))))
    rot_errors = np.empty(m)
    for i in range(m):
        rel = reference.rotations[i].T @ rot @ estimated.rotations[i]
        cos_theta = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
        rot_errors[i] = np.arccos(cos_theta)
    return AteReport(rmse=rmse, rotation_errors=rot_errors, scale=scale)


def depth_metrics(predicted, reference, mask):
    """Median-normalized absolute relative error and inlier ratio at 1.03.

    Both maps are divided by their own valid-pixel medians, so the metrics
    are invariant to independent positive rescaling of either input.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool)
    if pred.shape != ref.shape or pred.shape != valid.shape:
        raise InvalidInputError("depth maps and mask must share one shape")
    if not valid.any():
        raise InvalidInputError("mask selects no pixels")
    p = pred[valid]
    r = ref[valid]
    if np.any(p <= 0) or np.any(r <= 0):
        raise InvalidInputError("masked depths must be strictly positive")
    p = p / np.median(p)
    r = r / np.median(r)
    rel = float(np.mean(np.abs(p - r) / r))
    ratio = np.maximum(p / r, r / p)
    tau = float(np.mean(ratio < 1.03))
    return rel, tau
