"""Geometric primitives: quaternions, SE(3), Gaussian covariances, spherical
harmonics, and the pinhole camera model.

All rotations use unit quaternions in (w, x, y, z) order. Camera poses are
stored camera-to-world; the world-to-camera transform is the exact inverse
(R^T, -R^T t). Pose updates are applied as left-multiplied se3 exponentials
so the manifold constraint is never violated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCameraError, InvalidInputError

# Near plane in world units; projection is singular at z=0.
Z_NEAR = 0.01

# Real SH basis constants, bands 0..3 (splatting ecosystem convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    """Inverse of sigmoid on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def normalize_quat(q):
    """Scale quaternion(s) to unit norm. Raises on zero norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("quaternion must have nonzero finite norm")
    return q / n


def quat_to_rotation(q):
    """Convert quaternion(s) (w, x, y, z) to rotation matrices.

    Args:
        q: array of shape (4,) or (N, 4). Normalized internally; a zero-norm
            quaternion raises InvalidInputError.

    Returns:
        (3, 3) or (N, 3, 3) rotation matrices with determinant +1.
    """
    q = normalize_quat(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotation_to_quat(R):
    """Convert a rotation matrix to a unit quaternion (w, x, y, z).

    Uses Shepperd's method: picks the numerically largest component first.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    # Canonical sign: nonnegative scalar part.
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def skew(v):
    """Cross-product matrix [v]_x such that skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def build_covariance(q, log_scale):
    """Covariance Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    Args:
        q: quaternion(s), (4,) or (N, 4).
        log_scale: (3,) or (N, 3) log axis scales.

    Returns:
        (3, 3) or (N, 3, 3) symmetric PSD covariance matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(log_scale))):
        raise InvalidInputError("non-finite covariance parameters")
    single = q.ndim == 1
    R = quat_to_rotation(q).reshape(-1, 3, 3)
    s2 = np.exp(2.0 * np.atleast_2d(log_scale))
    M = R * s2[:, None, :]  # R @ diag(s^2)
    cov = M @ np.swapaxes(R, -1, -2)
    return cov[0] if single else cov


def sh_basis(dirs, degree):
    """Real SH basis values for unit directions.

    Args:
        dirs: (N, 3) unit vectors.
        degree: maximum band L in 0..3.

    Returns:
        (N, (L+1)^2) basis values in splatting band order.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidInputError(f"SH degree {degree} outside supported range 0..{MAX_SH_DEGREE}")
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    basis = np.empty((n, (degree + 1) ** 2), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 4] = SH_C2[0] * x * y
        basis[:, 5] = SH_C2[1] * y * z
        basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * x * z
        basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        basis[:, 10] = SH_C3[1] * x * y * z
        basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        basis[:, 14] = SH_C3[5] * z * (xx - yy)
        basis[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return basis


def sh_basis_gradient(dirs, degree):
    """Derivatives of sh_basis with respect to the direction components.

    Returns:
        (N, (L+1)^2, 3) array; entry [i, b, k] is dY_b/d(dir_k) at dirs[i].
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    grad = np.zeros((n, (degree + 1) ** 2, 3), dtype=np.float64)
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        grad[:, 1, 1] = -SH_C1
        grad[:, 2, 2] = SH_C1
        grad[:, 3, 0] = -SH_C1
    if degree >= 2:
        grad[:, 4, 0] = SH_C2[0] * y
        grad[:, 4, 1] = SH_C2[0] * x
        grad[:, 5, 1] = SH_C2[1] * z
        grad[:, 5, 2] = SH_C2[1] * y
        grad[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        grad[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        grad[:, 6, 2] = SH_C2[2] * (4.0 * z)
        grad[:, 7, 0] = SH_C2[3] * z
        grad[:, 7, 2] = SH_C2[3] * x
        grad[:, 8, 0] = SH_C2[4] * (2.0 * x)
        grad[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        grad[:, 9, 0] = SH_C3[0] * 6.0 * x * y
        grad[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        grad[:, 10, 0] = SH_C3[1] * y * z
        grad[:, 10, 1] = SH_C3[1] * x * z
        grad[:, 10, 2] = SH_C3[1] * x * y
        grad[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
        grad[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        grad[:, 11, 2] = SH_C3[2] * (8.0 * y * z)
        grad[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
        grad[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
        grad[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        grad[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        grad[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
        grad[:, 13, 2] = SH_C3[4] * (8.0 * x * z)
        grad[:, 14, 0] = SH_C3[5] * (2.0 * x * z)
        grad[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
        grad[:, 14, 2] = SH_C3[5] * (xx - yy)
        grad[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        grad[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return grad


def eval_sh(coeffs, degree, direction):
    """Evaluate SH color: clamp(sum_b c_b Y_b(d) + 0.5, 0, 1).

    Args:
        coeffs: ((L+1)^2, 3) per-band color coefficients, or (N, (L+1)^2, 3).
        degree: band limit L; must match the coefficient count.
        direction: unit 3-vector, or (N, 3) matching batched coeffs.

    Returns:
        rgb in [0, 1], shape (3,) or (N, 3).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    coeffs = coeffs[None] if single else coeffs
    bands = (degree + 1) ** 2
    if coeffs.shape[1] < bands:
        raise InvalidInputError(
            f"degree {degree} needs {bands} bands, coefficients provide {coeffs.shape[1]}"
        )
    dirs = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    basis = sh_basis(dirs, degree)
    rgb = np.einsum("nb,nbc->nc", basis, coeffs[:, :bands, :]) + 0.5
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb[0] if single else rgb


def se3_exp(twist):
    """Exponential map from a (v, omega) 6-vector to an SE(3) pair (R, t).

    Rodrigues' formula for the rotation block, the V matrix for translation.
    Small angles fall back to the quadratic Taylor expansion.
    """
    twist = np.asarray(twist, dtype=np.float64)
    if twist.shape != (6,) or not np.all(np.isfinite(twist)):
        raise InvalidInputError("twist must be a finite 6-vector")
    v, omega = twist[:3], twist[3:]
    theta = np.linalg.norm(omega)
    K = skew(omega)
    K2 = K @ K
    if theta < 1e-8:
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * K2
        V = np.eye(3) + ((1.0 - c) / theta**2) * K + ((theta - s) / theta**3) * K2
    return R, V @ v


def se3_log(R, t):
    """Inverse of se3_exp, exact for rotation angles below pi."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        omega = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        K = skew(omega)
        V_inv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        omega = (theta / (2.0 * np.sin(theta))) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
        K = skew(omega)
        coef = (1.0 - (theta * np.sin(theta)) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
        V_inv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return np.concatenate([V_inv @ t, omega])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world SE(3) pose.

    Attributes:
        width, height: image resolution in pixels.
        focal: shared fx = fy focal length in pixels.
        cx, cy: principal point in pixels.
        quat: unit quaternion (w, x, y, z), camera-to-world rotation.
        t: camera center in world coordinates.
    """

    width: int
    height: int
    focal: float
    cx: float
    cy: float
    quat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.focal <= 0 or not np.isfinite(self.focal):
            raise InvalidInputError("focal must be finite and positive")
        object.__setattr__(self, "quat", normalize_quat(np.asarray(self.quat, dtype=np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @classmethod
    def centered(cls, width, height, focal, quat=None, t=None):
        """Camera with the principal point at the pixel-grid center."""
        quat = np.array([1.0, 0.0, 0.0, 0.0]) if quat is None else quat
        t = np.zeros(3) if t is None else t
        return cls(width, height, focal, (width - 1) / 2.0, (height - 1) / 2.0, quat, t)

    def rotation(self):
        """Camera-to-world rotation matrix."""
        return quat_to_rotation(self.quat)

    def world_to_camera(self):
        """Exact inverse pose as (R_wc, t_wc): x_cam = R_wc x_world + t_wc."""
        R = self.rotation()
        return R.T, -R.T @ self.t

    def apply_twist(self, twist):
        """Left-multiplied local pose update: T <- se3_exp(twist) * T."""
        R_d, t_d = se3_exp(twist)
        R_new = R_d @ self.rotation()
        t_new = R_d @ self.t + t_d
        return replace(self, quat=rotation_to_quat(R_new), t=t_new)

    def pixel_rays(self):
        """Camera-frame rays of every pixel center at unit depth, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.focal, (vv - self.cy) / self.focal, np.ones_like(uu)], axis=-1
        )


def project(camera, points):
    """Project world point(s) through the pinhole model.

    Args:
        camera: Camera.
        points: (3,) or (..., 3) world coordinates.

    Returns:
        (uv, depth): pixel coordinates (..., 2) and camera-frame depth (...).

    Raises:
        BehindCameraError: if any point has camera depth <= Z_NEAR.
    """
    uv, depth, valid = project_valid(camera, points)
    if not np.all(valid):
        raise BehindCameraError("point at or behind the near plane")
    return uv, depth


def project_valid(camera, points):
    """Batched projection that flags near-plane violations instead of raising."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    R_wc, t_wc = camera.world_to_camera()
    cam = pts @ R_wc.T + t_wc
    z = cam[:, 2]
    valid = z > Z_NEAR
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty((pts.shape[0], 2), dtype=np.float64)
    uv[:, 0] = camera.cx + camera.focal * cam[:, 0] / safe_z
    uv[:, 1] = camera.cy + camera.focal * cam[:, 1] / safe_z
    if single:
        return uv[0], float(z[0]), bool(valid[0])
    return uv, z, valid


def backproject(camera, pixels, depth):
    """Lift pixel(s) at given camera depth(s) back to world coordinates.

    Args:
        camera: Camera.
        pixels: (2,) or (..., 2) pixel coordinates (u, v).
        depth: scalar or (...) camera-frame z depth, strictly positive.

    Returns:
        (3,) or (..., 3) world points; project() of the result returns the
        input pixel and depth up to floating-point roundoff.
    """
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise InvalidInputError("depth must be positive and finite")
    single = px.ndim == 1
    px = px.reshape(-1, 2)
    d = np.broadcast_to(d, (px.shape[0],)).astype(np.float64)
    x = (px[:, 0] - camera.cx) / camera.focal * d
    y = (px[:, 1] - camera.cy) / camera.focal * d
    cam = np.stack([x, y, d], axis=-1)
    world = cam @ camera.rotation().T + camera.t
    return world[0] if single else world


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene.

    Attributes:
        positions: (N, 3) world-space means.
        sh: (N, B, 3) SH coefficients, B = (L+1)^2, DC band first.
        opacity_logits: (N,) opacity logits; opacity = sigmoid(logit).
        rotations: (N, 4) unit quaternions (w, x, y, z).
        log_scales: (N, 3) log axis scales.
        confidences: (N,) per-point confidence >= 1 carried from point maps.
    """

    positions: np.ndarray
    sh: np.ndarray
    opacity_logits: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise InvalidInputError("sh must have shape (N, bands, 3)")
        bands = self.sh.shape[1]
        degree = int(round(np.sqrt(bands))) - 1
        if (degree + 1) ** 2 != bands or not 0 <= degree <= MAX_SH_DEGREE:
            raise InvalidInputError(f"unsupported SH band count {bands}")
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(n)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def copy(self):
        return GaussianCloud(
            self.positions.copy(),
            self.sh.copy(),
            self.opacity_logits.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.confidences.copy(),
        )

    def opacities(self):
        """Per-point opacity alpha = sigmoid(opacity_logit)."""
        return sigmoid(self.opacity_logits)

    def normalize_rotations(self):
        """Renormalize rotation quaternions in place (post-update invariant)."""
        self.rotations = normalize_quat(self.rotations)


@dataclass
class ImageBuffer:
    """H x W x 3 radiance image with values in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError("rgb must have shape (H, W, 3)")
        if not np.all(np.isfinite(self.rgb)):
            raise InvalidInputError("image contains non-finite values")

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    def clamped(self):
        """Copy with channels clamped to [0, 1]."""
        return ImageBuffer(np.clip(self.rgb, 0.0, 1.0))


def as_rgb(image):
    """Accept an ImageBuffer or a raw (H, W, 3) array; return the array."""
    if isinstance(image, ImageBuffer):
        return image.rgb
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError("expected an (H, W, 3) image")
    return arr
