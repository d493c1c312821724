"""End-to-end reconstruction: point-map priors to splat scene and metrics.

Stage order is fixed: provider, build_graph, align_global, average_focal,
extract_cameras, rank_views, cross_view_mask, prune_and_init,
gauba_optimize, align_test_poses, eval, writers. Any stage failure is
re-raised as a PipelineStageError naming the stage. Intermediate results
(aligned geometry, masks, initial cloud) are checkpointed to npz in full
precision, so a resumed run reproduces the fresh run byte for byte.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .alignment import (
    ALIGN_ITERATIONS,
    GlobalGeometry,
    align_global,
    average_focal,
    build_graph,
    extract_cameras,
    per_view_focals,
)
from .bundle import OptimConfig, align_test_poses, gauba_optimize
from .covisibility import (
    DEFAULT_THETA,
    ViewRank,
    VisibilityMask,
    cross_view_mask,
    prune_and_init,
    rank_views,
)
from .errors import InvalidInputError, PipelineStageError, SparseSplatError
from .fileio import (
    read_image,
    read_poses,
    write_image,
    write_loss_trace,
    write_metrics,
    write_ply,
    write_poses,
)
from .geometry import Camera, GaussianCloud, MAX_SH_DEGREE, as_rgb
from .metrics import Trajectory, ate, depth_metrics, psnr, ssim
from .provider import load_pairwise, make_scene, synthesize_pairwise, write_focals, write_pairwise
from .renderer import render_forward

MIN_SIDE = 16  # SSIM needs 11 pixels; keep a little slack on top.


@dataclass
class PipelineConfig:
    """Reconstruction run description.

    views counts the training views; the synthetic provider captures twice
    as many frames and holds half out for testing. gauba_iterations of None
    takes the preset schedule; 0 skips refinement entirely, which serves as
    the unrefined baseline for before/after comparisons.
    """

    views: int = 3
    provider: str = "synthetic"
    input_dir: str = ""
    output_dir: str = "out"
    preset: str = "s"
    theta: float = DEFAULT_THETA
    beta: float = 100.0
    seed: int = 0
    width: int = 256
    height: int = 256
    sh_degree: int = 0
    lambda_dssim: float = 0.0
    noise: float = 0.0
    focal_jitter: float = 0.0
    gauba_iterations: int = -1  # -1 means "use the preset schedule"
    align_iterations: int = ALIGN_ITERATIONS
    resume: bool = False

    def __post_init__(self):
        if self.views < 2:
            raise InvalidInputError("need at least 2 training views")
        if self.provider not in ("synthetic", "files"):
            raise InvalidInputError(f"unknown provider {self.provider!r}")
        if self.provider == "files" and not self.input_dir:
            raise InvalidInputError("files provider needs an input directory")
        if self.preset.lower() not in ("s", "xl"):
            raise InvalidInputError(f"unknown preset {self.preset!r}")
        if not np.isfinite(self.theta) and not np.isinf(self.theta):
            raise InvalidInputError("theta must not be NaN")
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise InvalidInputError(f"images must be at least {MIN_SIDE} pixels per side")
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InvalidInputError(f"sh_degree must lie in 0..{MAX_SH_DEGREE}")
        if self.noise < 0 or self.focal_jitter < 0:
            raise InvalidInputError("noise levels must be nonnegative")
        if self.gauba_iterations < -1:
            raise InvalidInputError("gauba_iterations must be -1, 0, or positive")


@dataclass
class ProviderData:
    """Everything downstream stages consume, source-agnostic."""

    train_indices: list  # global frame ids, ascending
    test_indices: list
    train_images: list  # (H, W, 3) float64 in [0, 1]
    test_images: list
    predictions: dict  # local (a, b) -> PairwisePrediction in local ids
    width: int
    height: int
    gt_train_cameras: list = None
    gt_test_cameras: list = None
    gt_test_depths: list = None
    gt_focal: float = None


@dataclass
class RunResult:
    output_dir: Path
    metrics: dict
    report: object  # OptimReport, or None when refinement was skipped
    cloud: GaussianCloud
    train_cameras: list
    test_cameras: list
    train_indices: list
    test_indices: list


def train_test_split(views):
    """Global frame indices for 2*views frames: held-out views sit strictly
    inside the sequence, spread uniformly; training keeps the rest."""
    frames = 2 * views
    test = np.floor(np.linspace(1, frames - 2, views) + 0.5).astype(int)
    test_set = set(int(i) for i in test)
    if len(test_set) != views:
        raise InvalidInputError(f"degenerate split for {views} views")
    train = [i for i in range(frames) if i not in test_set]
    return train, sorted(test_set)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineStageError:
        raise
    except SparseSplatError as exc:
        raise PipelineStageError(name, exc) from exc


def _localize(prediction, local_edge):
    return replace(prediction, edge=local_edge)


def _synthetic_provider(config):
    scene = make_scene(2 * config.views, config.width, config.height, seed=config.seed)
    train, test = train_test_split(config.views)
    graph = build_graph(config.views)
    predictions = {}
    for a, b in graph.edges:
        pred = synthesize_pairwise(
            scene, (train[a], train[b]), config.noise, config.seed,
            focal_jitter=config.focal_jitter,
        )
        predictions[(a, b)] = _localize(pred, (a, b))
    return ProviderData(
        train_indices=train,
        test_indices=test,
        train_images=[scene.images[i] for i in train],
        test_images=[scene.images[i] for i in test],
        predictions=predictions,
        width=config.width,
        height=config.height,
        gt_train_cameras=[scene.cameras[i] for i in train],
        gt_test_cameras=[scene.cameras[i] for i in test],
        gt_test_depths=[scene.depths[i] for i in test],
        gt_focal=scene.cameras[0].focal,
    )


def read_split(path):
    """Parse `train i j ...` / `test i j ...` lines."""
    groups = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] not in ("train", "test"):
                raise InvalidInputError(f"{path}: unknown split group {parts[0]!r}")
            groups[parts[0]] = [int(p) for p in parts[1:]]
    if set(groups) != {"train", "test"}:
        raise InvalidInputError(f"{path}: need exactly train and test lines")
    return sorted(groups["train"]), sorted(groups["test"])


def write_split(path, train, test):
    with open(path, "w") as f:
        f.write("train " + " ".join(str(i) for i in train) + "\n")
        f.write("test " + " ".join(str(i) for i in test) + "\n")


def _frame_path(root, index):
    return Path(root) / "frames" / f"frame_{index:03d}.png"


def _files_provider(config):
    root = Path(config.input_dir)
    train, test = read_split(root / "split.txt")
    if len(train) != config.views:
        raise InvalidInputError(
            f"split lists {len(train)} training views, config expects {config.views}"
        )
    train_images = [np.asarray(read_image(_frame_path(root, i)), dtype=np.float64) for i in train]
    test_images = [np.asarray(read_image(_frame_path(root, i)), dtype=np.float64) for i in test]
    height, width = train_images[0].shape[:2]
    for img in train_images + test_images:
        if img.shape != (height, width, 3):
            raise InvalidInputError("frames disagree on resolution")
    graph = build_graph(config.views)
    predictions = {}
    for a, b in graph.edges:
        pred = load_pairwise(root / "pairs", (train[a], train[b]), expected_shape=(height, width))
        predictions[(a, b)] = _localize(pred, (a, b))

    gt_train = gt_test = None
    ref_path = root / "poses_ref.txt"
    if ref_path.exists():
        poses = read_poses(ref_path)
        focal = 1.2 * max(width, height)  # nominal; reference poses carry no intrinsics
        def build(ids):
            cams = []
            for i in ids:
                if i not in poses:
                    raise InvalidInputError(f"poses_ref.txt misses frame {i}")
                quat, t = poses[i]
                cams.append(Camera.centered(width, height, focal, quat=quat, t=t))
            return cams
        gt_train = build(train)
        gt_test = build(test)
    return ProviderData(
        train_indices=train,
        test_indices=test,
        train_images=train_images,
        test_images=test_images,
        predictions=predictions,
        width=width,
        height=height,
        gt_train_cameras=gt_train,
        gt_test_cameras=gt_test,
    )


def dump_synthetic(config, out_dir):
    """Materialize a synthetic capture as a files-provider input directory."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    scene = make_scene(2 * config.views, config.width, config.height, seed=config.seed)
    train, test = train_test_split(config.views)
    write_split(out / "split.txt", train, test)
    for i, image in enumerate(scene.images):
        write_image(_frame_path(out, i), image)
    graph = build_graph(config.views)
    focals = {}
    for a, b in graph.edges:
        pred = synthesize_pairwise(
            scene, (train[a], train[b]), config.noise, config.seed,
            focal_jitter=config.focal_jitter,
        )
        write_pairwise(pred, out / "pairs")
        # First estimate per view wins; later edges only fill gaps.
        focals.setdefault(train[a], pred.focal_estimate_n)
        focals.setdefault(train[b], pred.focal_estimate_m)
    write_focals(out / "pairs" / "focals.txt", focals)
    write_poses(out / "poses_ref.txt", scene.cameras, indices=range(len(scene.cameras)))
    return out


def _fingerprint(config, data):
    return np.array(
        [config.seed, config.views, data.width, data.height,
         config.noise, config.focal_jitter, config.align_iterations],
        dtype=np.float64,
    )


def _save_geometry(path, geometry, fp):
    np.savez(
        path,
        fingerprint=fp,
        quats=np.stack([c.quat for c in geometry.cameras]),
        centers=np.stack([c.t for c in geometry.cameras]),
        focal=geometry.cameras[0].focal,
        point_maps=np.stack(geometry.point_maps),
        conf_maps=np.stack(geometry.conf_maps),
        depth_maps=np.stack(geometry.depth_maps),
        residual=geometry.residual,
        loss_trace=geometry.loss_trace,
    )


def _check_fingerprint(path, blob, fp):
    if not np.array_equal(blob["fingerprint"], fp):
        raise InvalidInputError(f"{path}: checkpoint belongs to a different configuration")


def _load_geometry(path, data, fp):
    with np.load(path) as blob:
        _check_fingerprint(path, blob, fp)
        focal = float(blob["focal"])
        cameras = [
            Camera.centered(data.width, data.height, focal, quat=q, t=t)
            for q, t in zip(blob["quats"], blob["centers"])
        ]
        return GlobalGeometry(
            cameras=cameras,
            point_maps=list(blob["point_maps"]),
            conf_maps=list(blob["conf_maps"]),
            depth_maps=list(blob["depth_maps"]),
            residual=float(blob["residual"]),
            loss_trace=blob["loss_trace"],
        )


def _save_masks(path, rank, visibility, fp):
    np.savez(
        path, fingerprint=fp, means=rank.means, order=rank.order,
        masks=np.stack(visibility.masks),
    )


def _load_masks(path, fp):
    with np.load(path) as blob:
        _check_fingerprint(path, blob, fp)
        rank = ViewRank(means=blob["means"], order=blob["order"])
        visibility = VisibilityMask(masks=list(blob["masks"]))
        return rank, visibility


def _save_cloud(path, cloud, fp):
    np.savez(
        path, fingerprint=fp, positions=cloud.positions, sh=cloud.sh,
        opacity_logits=cloud.opacity_logits, rotations=cloud.rotations,
        log_scales=cloud.log_scales, confidences=cloud.confidences,
    )


def _load_cloud(path, fp):
    with np.load(path) as blob:
        _check_fingerprint(path, blob, fp)
        return GaussianCloud(
            positions=blob["positions"], sh=blob["sh"],
            opacity_logits=blob["opacity_logits"], rotations=blob["rotations"],
            log_scales=blob["log_scales"], confidences=blob["confidences"],
        )


def _slerp(qa, qb, frac):
    qa = qa / np.linalg.norm(qa)
    qb = qb / np.linalg.norm(qb)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 1.0 - 1e-10:
        mix = (1.0 - frac) * qa + frac * qb
        return mix / np.linalg.norm(mix)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    mix = (np.sin((1.0 - frac) * theta) * qa + np.sin(frac * theta) * qb) / np.sin(theta)
    return mix / np.linalg.norm(mix)


def _seed_test_cameras(train_indices, test_indices, train_cameras):
    """Seed each held-out view by interpolating its bracketing train poses.

    The split keeps the first and last frames in the training set, so every
    test frame has neighbors on both sides; index-weighted interpolation
    puts the seed within the photometric alignment's capture range, which
    plain nearest-pose seeding does not for wide frame spacing.
    """
    seeds = []
    arr = np.asarray(train_indices)
    for g in test_indices:
        right = int(np.searchsorted(arr, g))
        left = right - 1
        frac = (g - arr[left]) / (arr[right] - arr[left])
        ca, cb = train_cameras[left], train_cameras[right]
        quat = _slerp(ca.quat, cb.quat, frac)
        center = (1.0 - frac) * ca.t + frac * cb.t
        seeds.append(replace(ca, quat=quat, t=center))
    return seeds


def _evaluate(config, data, refined_cloud, train_cams, test_cams, focal, report):
    metrics = {
        "views": config.views,
        "preset": config.preset.lower(),
        "seed": config.seed,
        "theta": float(config.theta),
        "focal": float(focal),
        "gaussians": len(refined_cloud),
    }
    if data.gt_focal is not None:
        metrics["focal_rel_error"] = abs(focal - data.gt_focal) / data.gt_focal
    if report is not None:
        metrics["initial_loss"] = report.initial_loss
        metrics["final_loss"] = report.final_loss
    renders = []
    psnrs, ssims = [], []
    for cam, ref in zip(test_cams, data.test_images):
        out = render_forward(refined_cloud, cam)
        image = out.rgb.clamped()
        renders.append((image, out))
        psnrs.append(psnr(image.rgb, as_rgb(ref)))
        ssims.append(ssim(image.rgb, as_rgb(ref)))
    metrics["psnr"] = float(np.mean(psnrs))
    metrics["ssim"] = float(np.mean(ssims))
    for g, p, s in zip(data.test_indices, psnrs, ssims):
        metrics[f"psnr_view_{g}"] = float(p)
        metrics[f"ssim_view_{g}"] = float(s)

    if data.gt_train_cameras is not None:
        rep = ate(
            Trajectory.from_cameras(data.train_indices, train_cams),
            Trajectory.from_cameras(data.train_indices, data.gt_train_cameras),
        )
        metrics["ate_train"] = rep.rmse
        metrics["rot_train_deg"] = float(np.degrees(rep.rotation_errors.mean()))
    if data.gt_test_cameras is not None:
        rep = ate(
            Trajectory.from_cameras(data.test_indices, test_cams),
            Trajectory.from_cameras(data.test_indices, data.gt_test_cameras),
        )
        metrics["ate_test"] = rep.rmse
        metrics["rot_test_deg"] = float(np.degrees(rep.rotation_errors.mean()))

    if data.gt_test_depths is not None:
        rels, taus = [], []
        for (image, out), ref_depth in zip(renders, data.gt_test_depths):
            mask = (ref_depth > 0) & (out.accumulated_alpha > 0.5) & (out.expected_depth > 0)
            if np.any(mask):
                rel, tau = depth_metrics(out.expected_depth, ref_depth, mask)
                rels.append(rel)
                taus.append(tau)
        if rels:
            metrics["depth_abs_rel"] = float(np.mean(rels))
            metrics["depth_tau"] = float(np.mean(taus))
    return metrics, [image for image, _ in renders]


def _write_artifacts(config, data, out, refined_cloud, train_cams, test_cams, report, metrics, renders):
    write_ply(out / "scene.ply", refined_cloud)
    write_poses(out / "poses_train.txt", train_cams, indices=data.train_indices)
    write_poses(out / "poses_test.txt", test_cams, indices=data.test_indices)
    if data.gt_train_cameras is not None:
        write_poses(out / "poses_train_ref.txt", data.gt_train_cameras, indices=data.train_indices)
        write_poses(out / "poses_test_ref.txt", data.gt_test_cameras, indices=data.test_indices)
    trace = report.loss_trace if report is not None else np.zeros(0)
    write_loss_trace(out / "loss_trace.csv", trace)
    write_metrics(out / "metrics.txt", metrics)
    renders_dir = out / "renders"
    refs_dir = out / "references"
    renders_dir.mkdir(exist_ok=True)
    refs_dir.mkdir(exist_ok=True)
    for g, image, ref in zip(data.test_indices, renders, data.test_images):
        write_image(renders_dir / f"test_{g:03d}.png", image.rgb)
        write_image(refs_dir / f"test_{g:03d}.png", as_rgb(ref))


def run_reconstruct(config):
    """Execute the full pipeline and write all artifacts to the output dir."""
    out = Path(config.output_dir)
    ckpt = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    ckpt.mkdir(exist_ok=True)

    provider_fn = _synthetic_provider if config.provider == "synthetic" else _files_provider
    data = _stage("provider", provider_fn, config)
    graph = _stage("build_graph", build_graph, config.views)

    fp = _fingerprint(config, data)
    align_ck = ckpt / "alignment.npz"
    if config.resume and align_ck.exists():
        geometry = _stage("align_global", _load_geometry, align_ck, data, fp)
    else:
        geometry = _stage(
            "align_global", align_global, graph, data.predictions,
            iterations=config.align_iterations, seed=config.seed,
        )
        _save_geometry(align_ck, geometry, fp)
    focal = _stage("average_focal", lambda: average_focal(per_view_focals(graph, data.predictions)))
    cameras = _stage("extract_cameras", extract_cameras, geometry)

    masks_ck = ckpt / "masks.npz"
    if config.resume and masks_ck.exists():
        rank, visibility = _stage("cross_view_mask", _load_masks, masks_ck, fp)
    else:
        rank = _stage("rank_views", rank_views, geometry.conf_maps)
        visibility = _stage("cross_view_mask", cross_view_mask, geometry, rank, config.theta)
        _save_masks(masks_ck, rank, visibility, fp)

    cloud_ck = ckpt / "init_cloud.npz"
    if config.resume and cloud_ck.exists():
        cloud = _stage("prune_and_init", _load_cloud, cloud_ck, fp)
    else:
        cloud = _stage(
            "prune_and_init", prune_and_init, geometry, visibility,
            data.train_images, config.sh_degree,
        )
        _save_cloud(cloud_ck, cloud, fp)

    overrides = dict(beta=config.beta, lambda_dssim=config.lambda_dssim, seed=config.seed)
    if config.gauba_iterations > 0:
        overrides["iterations"] = config.gauba_iterations
    ocfg = OptimConfig.preset(config.preset, **overrides)
    if config.gauba_iterations == 0:
        refined_cloud, train_cams, report = cloud, cameras, None
    else:
        refined_cloud, train_cams, report = _stage(
            "gauba_optimize", gauba_optimize, cloud, cameras, data.train_images, ocfg
        )

    seeds = _seed_test_cameras(data.train_indices, data.test_indices, train_cams)
    test_cams = _stage(
        "align_test_poses", align_test_poses, refined_cloud, seeds, data.test_images, ocfg
    )

    metrics, renders = _stage(
        "eval", _evaluate, config, data, refined_cloud, train_cams, test_cams, focal, report
    )
    _stage(
        "writers", _write_artifacts, config, data, out, refined_cloud,
        train_cams, test_cams, report, metrics, renders,
    )
    return RunResult(
        output_dir=out,
        metrics=metrics,
        report=report,
        cloud=refined_cloud,
        train_cameras=train_cams,
        test_cameras=test_cams,
        train_indices=data.train_indices,
        test_indices=data.test_indices,
    )
