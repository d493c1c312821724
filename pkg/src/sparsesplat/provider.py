"""Pairwise point-map provider.

Supplies what the reconstruction pipeline consumes as priors: per-edge dense
point maps with confidences, plus per-view focal estimates. Two sources are
supported: an analytic synthetic scene (exact ground truth with controllable
noise) and .ptm dumps written by an external predictor.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DegeneratePairError,
    DimensionMismatchError,
    InvalidInputError,
    NonFinitePayloadError,
    TruncatedPayloadError,
)
from .geometry import Camera, Z_NEAR, rotation_to_quat

PTM_MAGIC = b"PTM1"

# Confidence model: valid pixels get 1 + exp(K / (1 + sigma_eff)) where
# sigma_eff is the pixel's own noise level. Invalid pixels sit exactly at the
# floor of 1, which downstream stages treat as "no information".
CONFIDENCE_K = 3.0
CONFIDENCE_FLOOR = 1.0

# Per-pixel noise multiplier range; mean 1 keeps the aggregate noise scale at
# sigma while giving the confidence maps genuine per-pixel variation.
NOISE_JITTER_LO = 0.5
NOISE_JITTER_HI = 1.5


def edge_seed(seed, n, m):
    """Decorrelated 64-bit stream seed for edge (n, m); order-sensitive."""
    return (int(seed) ^ (n * 0x9E3779B1 + m * 0x85EBCA77)) & 0xFFFFFFFFFFFFFFFF


@dataclass
class PairwisePrediction:
    """Dense two-view prior for edge (n, m), both maps in view n's frame.

    Attributes:
        edge: (n, m) view indices.
        map_src: (H, W, 3) points of view n, expressed in frame n.
        map_tgt: (H, W, 3) points of view m, expressed in frame n.
        conf_src, conf_tgt: (H, W) confidences, >= 1 everywhere and exactly 1
            on pixels carrying no geometry.
        focal_estimate_n, focal_estimate_m: per-view focal guesses in pixels.
    """

    edge: tuple
    map_src: np.ndarray
    map_tgt: np.ndarray
    conf_src: np.ndarray
    conf_tgt: np.ndarray
    focal_estimate_n: float
    focal_estimate_m: float

    def __post_init__(self):
        n, m = self.edge
        if n == m:
            raise InvalidInputError("edge endpoints must differ")
        self.edge = (int(n), int(m))
        # Double precision in memory; the .ptm interchange format is float32,
        # so file round trips quantize but synthetic pipelines stay exact.
        self.map_src = np.ascontiguousarray(self.map_src, dtype=np.float64)
        self.map_tgt = np.ascontiguousarray(self.map_tgt, dtype=np.float64)
        self.conf_src = np.ascontiguousarray(self.conf_src, dtype=np.float64)
        self.conf_tgt = np.ascontiguousarray(self.conf_tgt, dtype=np.float64)
        h, w = self.conf_src.shape
        for arr, shape in (
            (self.map_src, (h, w, 3)),
            (self.map_tgt, (h, w, 3)),
            (self.conf_tgt, (h, w)),
        ):
            if arr.shape != shape:
                raise InvalidInputError(f"prediction arrays disagree on shape: {arr.shape} vs {shape}")
        for arr in (self.map_src, self.map_tgt, self.conf_src, self.conf_tgt):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("prediction payload contains non-finite values")
        if self.conf_src.min() < CONFIDENCE_FLOOR or self.conf_tgt.min() < CONFIDENCE_FLOOR:
            raise InvalidInputError("confidences must be >= 1")
        if not (self.focal_estimate_n > 0 and self.focal_estimate_m > 0):
            raise InvalidInputError("focal estimates must be positive")

    @property
    def shape(self):
        return self.conf_src.shape

    def valid_src(self):
        return self.conf_src > CONFIDENCE_FLOOR

    def valid_tgt(self):
        return self.conf_tgt > CONFIDENCE_FLOOR


@dataclass
class SyntheticScene:
    """Analytic multi-view scene: a shaded, textured sphere on black.

    Depth and color are closed-form per pixel, so images, depth maps, and
    point maps are exact ground truth rather than renderer output.
    """

    cameras: list
    images: list  # (H, W, 3) float64 in [0, 1]
    depths: list  # (H, W) float64 camera-z; 0 marks a miss
    center: np.ndarray
    radius: float
    scale: float  # RMS spread of visible surface points about their centroid
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self):
        return len(self.cameras)

    def valid_mask(self, view):
        return self.depths[view] > 0.0

    def world_points(self, view):
        """Backproject the view's depth map; returns ((H, W, 3), valid mask)."""
        cam = self.cameras[view]
        rays = cam.pixel_rays()
        depth = self.depths[view]
        pts_cam = rays * depth[:, :, None]
        world = pts_cam @ cam.rotation().T + cam.t
        return world, depth > 0.0


def _look_at(eye, target, up):
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return rotation_to_quat(rot)


def _sphere_texture(normal):
    """View-independent surface color from the unit normal, shape (..., 3)."""
    nx, ny, nz = normal[..., 0], normal[..., 1], normal[..., 2]
    phi = np.arctan2(nz, nx)
    detail = 0.12 * np.sin(16.0 * phi) * np.sin(12.0 * ny)
    rgb = np.stack(
        [
            0.50 + 0.30 * np.sin(6.0 * phi) * np.cos(4.0 * ny) + detail,
            0.50 + 0.30 * np.sin(6.0 * phi + 2.1) * np.cos(4.0 * ny + 1.0) + detail,
            0.50 + 0.30 * np.cos(5.0 * phi - 1.0) * np.sin(3.0 * ny) + detail,
        ],
        axis=-1,
    )
    light = np.array([0.4, 0.8, 0.45])
    light = light / np.linalg.norm(light)
    shade = 0.55 + 0.45 * np.clip(normal @ light, 0.0, None)
    return np.clip(rgb * shade[..., None], 0.0, 1.0)


def make_scene(
    n_frames,
    width,
    height,
    *,
    seed=0,
    radius=1.0,
    distance_factor=3.5,
    arc_degrees=90.0,
    elevation_degrees=12.0,
    focal=None,
):
    """Build a textured-sphere scene observed from an arc of cameras.

    Cameras sit on an arc of ``arc_degrees`` at roughly ``distance_factor *
    radius`` from the sphere center, with a seeded distance jitter and a
    sinusoidal elevation sweep so the centers are not coplanar.
    """
    if n_frames < 2:
        raise InvalidInputError("need at least 2 frames")
    if width < 2 or height < 2:
        raise InvalidInputError("image must be at least 2x2")
    rng = np.random.default_rng(seed)
    center = np.zeros(3)
    if focal is None:
        focal = 1.2 * max(width, height)
    up = np.array([0.0, 1.0, 0.0])
    arc = np.deg2rad(arc_degrees)
    elev = np.deg2rad(elevation_degrees)
    cameras = []
    images = []
    depths = []
    for i in range(n_frames):
        frac = i / (n_frames - 1)
        azimuth = (frac - 0.5) * arc
        elevation = elev * np.sin(2.0 * np.pi * frac + 0.7)
        dist = distance_factor * radius * (1.0 + 0.03 * rng.uniform(-1.0, 1.0))
        eye = center + dist * np.array(
            [
                np.sin(azimuth) * np.cos(elevation),
                np.sin(elevation),
                -np.cos(azimuth) * np.cos(elevation),
            ]
        )
        quat = _look_at(eye, center, up)
        cam = Camera.centered(width, height, focal, quat=quat, t=eye)
        image, depth = _render_sphere(cam, center, radius)
        if not np.any(depth > 0.0):
            raise InvalidInputError(f"view {i} sees no part of the scene")
        cameras.append(cam)
        images.append(image)
        depths.append(depth)
    scale = _surface_scale(cameras, depths)
    return SyntheticScene(
        cameras=cameras,
        images=images,
        depths=depths,
        center=center,
        radius=radius,
        scale=scale,
    )


def _render_sphere(camera, center, radius):
    """Exact ray-traced image and depth of the textured sphere."""
    rays = camera.pixel_rays()
    dirs = rays @ camera.rotation().T
    oc = camera.t - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc > 0.0
    sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
    s = (-b - sqrt_disc) / (2.0 * a)
    hit &= s > Z_NEAR
    depth = np.where(hit, s, 0.0)
    points = camera.t + dirs * depth[:, :, None]
    normal = (points - center) / radius
    image = np.where(hit[:, :, None], _sphere_texture(normal), 0.0)
    return image, depth


def _surface_scale(cameras, depths):
    pts = []
    for cam, depth in zip(cameras, depths):
        valid = depth > 0.0
        rays = cam.pixel_rays()[valid]
        cam_pts = rays * depth[valid][:, None]
        pts.append(cam_pts @ cam.rotation().T + cam.t)
    pts = np.concatenate(pts, axis=0)
    centered = pts - pts.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))


def _facing(points, normals, eye):
    return np.sum(normals * (eye - points), axis=-1) > 0.0


def synthesize_pairwise(scene, edge, noise, seed, focal_jitter=0.0):
    """Ground-truth point maps for edge (n, m) with optional Gaussian noise.

    Both maps are expressed in view n's camera frame. Noise is isotropic with
    standard deviation ``noise * scene.scale`` modulated per pixel; each
    pixel's confidence reflects its own effective noise level. Deterministic
    given (seed, edge).
    """
    n, m = edge
    count = len(scene)
    if not (0 <= n < count and 0 <= m < count) or n == m:
        raise InvalidInputError(f"edge {edge} invalid for {count} views")
    cam_n = scene.cameras[n]
    cam_m = scene.cameras[m]
    pts_n, valid_n = scene.world_points(n)
    pts_m, valid_m = scene.world_points(m)
    _check_covisible(scene, edge, pts_n, valid_n, pts_m, valid_m)

    # The source view's points live natively in frame n: ray * depth, with no
    # world round trip to pollute the low bits.
    R_wc, t_wc = cam_n.world_to_camera()
    map_src = np.where(
        valid_n[:, :, None], cam_n.pixel_rays() * scene.depths[n][:, :, None], 0.0
    )
    map_tgt = np.where(valid_m[:, :, None], pts_m @ R_wc.T + t_wc, 0.0)

    rng = np.random.default_rng(edge_seed(seed, n, m))
    shape = scene.depths[n].shape
    jitter_src = rng.uniform(NOISE_JITTER_LO, NOISE_JITTER_HI, size=shape)
    jitter_tgt = rng.uniform(NOISE_JITTER_LO, NOISE_JITTER_HI, size=shape)
    noise_src = rng.standard_normal(shape + (3,))
    noise_tgt = rng.standard_normal(shape + (3,))
    sigma = noise * scene.scale
    map_src = map_src + valid_n[:, :, None] * (sigma * jitter_src)[:, :, None] * noise_src
    map_tgt = map_tgt + valid_m[:, :, None] * (sigma * jitter_tgt)[:, :, None] * noise_tgt

    conf_src = np.where(valid_n, _confidence(noise * jitter_src), CONFIDENCE_FLOOR)
    conf_tgt = np.where(valid_m, _confidence(noise * jitter_tgt), CONFIDENCE_FLOOR)
    focal_n = cam_n.focal * (1.0 + focal_jitter * rng.uniform(-1.0, 1.0))
    focal_m = cam_m.focal * (1.0 + focal_jitter * rng.uniform(-1.0, 1.0))
    return PairwisePrediction(
        edge=(n, m),
        map_src=map_src,
        map_tgt=map_tgt,
        conf_src=conf_src,
        conf_tgt=conf_tgt,
        focal_estimate_n=focal_n,
        focal_estimate_m=focal_m,
    )


def _confidence(sigma_eff):
    return CONFIDENCE_FLOOR + np.exp(CONFIDENCE_K / (1.0 + sigma_eff))


def _check_covisible(scene, edge, pts_n, valid_n, pts_m, valid_m):
    n, m = edge
    normal_n = (pts_n - scene.center) / scene.radius
    normal_m = (pts_m - scene.center) / scene.radius
    eye_n = scene.cameras[n].t
    eye_m = scene.cameras[m].t
    shared_m = valid_m & _facing(pts_m, normal_m, eye_n)
    shared_n = valid_n & _facing(pts_n, normal_n, eye_m)
    if not (np.any(shared_m) and np.any(shared_n)):
        raise DegeneratePairError(f"views {n} and {m} share no covisible surface")


def write_pairwise(prediction, directory):
    """Dump a prediction as edge_<n>_<m>_{src,tgt}.ptm in directory."""
    n, m = prediction.edge
    _write_ptm(directory / f"edge_{n}_{m}_src.ptm", prediction.map_src, prediction.conf_src)
    _write_ptm(directory / f"edge_{n}_{m}_tgt.ptm", prediction.map_tgt, prediction.conf_tgt)


def load_pairwise(directory, edge, expected_shape=None):
    """Read a prediction written by write_pairwise plus focals.txt.

    Raises FileNotFoundError, BadMagicError, TruncatedPayloadError,
    DimensionMismatchError, or NonFinitePayloadError for the distinct
    failure modes.
    """
    n, m = edge
    map_src, conf_src = _read_ptm(directory / f"edge_{n}_{m}_src.ptm", expected_shape)
    map_tgt, conf_tgt = _read_ptm(directory / f"edge_{n}_{m}_tgt.ptm", expected_shape)
    if map_src.shape != map_tgt.shape:
        raise DimensionMismatchError(
            f"edge files disagree on resolution: {map_src.shape[:2]} vs {map_tgt.shape[:2]}"
        )
    focals = read_focals(directory / "focals.txt")
    for view in (n, m):
        if view not in focals:
            raise InvalidInputError(f"focals.txt has no entry for view {view}")
    return PairwisePrediction(
        edge=(n, m),
        map_src=map_src,
        map_tgt=map_tgt,
        conf_src=conf_src,
        conf_tgt=conf_tgt,
        focal_estimate_n=focals[n],
        focal_estimate_m=focals[m],
    )


def _write_ptm(path, points, conf):
    points = np.ascontiguousarray(points, dtype="<f4")
    conf = np.ascontiguousarray(conf, dtype="<f4")
    h, w = conf.shape
    with open(path, "wb") as f:
        f.write(PTM_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(points.tobytes())
        f.write(conf.tobytes())


def _read_ptm(path, expected_shape=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PTM_MAGIC:
        raise BadMagicError(f"{path}: expected magic {PTM_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: header cut short at {len(blob)} bytes")
    h, w = struct.unpack("<II", blob[4:12])
    if h == 0 or w == 0:
        raise DimensionMismatchError(f"{path}: header dimensions {h}x{w} must be positive")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatchError(
            f"{path}: header says {h}x{w}, dataset resolution is "
            f"{expected_shape[0]}x{expected_shape[1]}"
        )
    expected = 12 + h * w * 3 * 4 + h * w * 4
    if len(blob) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(blob)}")
    points = np.frombuffer(blob, dtype="<f4", count=h * w * 3, offset=12).reshape(h, w, 3)
    conf = np.frombuffer(blob, dtype="<f4", count=h * w, offset=12 + h * w * 12).reshape(h, w)
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(conf))):
        raise NonFinitePayloadError(f"{path}: payload contains non-finite values")
    return points.copy(), conf.copy()


def write_focals(path, focals):
    """Write per-view focal estimates, one `<view> <focal>` line each."""
    with open(path, "w") as f:
        for view in sorted(focals):
            f.write(f"{int(view)} {focals[view]!r}\n")


def read_focals(path):
    focals = {}
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                view = int(parts[0])
                focal = float(parts[1])
            except (ValueError, IndexError) as exc:
                raise InvalidInputError(f"focals.txt line {line_number}: {line!r}") from exc
            focals[view] = focal
    return focals
