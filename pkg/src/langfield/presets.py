"""Built-in synthetic fixtures and the evaluation protocol that runs on them.

Each preset bundles a ground-truth scene, a perturbed starting scene,
train/eval cameras, a codebook, and a short training schedule sized for
desk-scale runs. Supervision (rgb targets, masks, latent target maps)
is produced by `build_view_data`, which also fits the latent compressor
on pooled features when one is not supplied.

Semantic evaluation masks out pixels with alpha below 0.5 on both sides:
labels only exist where surface actually rendered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .hcam import (
    Autoencoder,
    HIERARCHIES,
    ae_train,
    encode_pooled,
    hierarchical_mask_pool,
    make_synthetic_features,
)
from .metrics import assign_argmax, mean_acc, mean_iou, semantic_fscore
from .query import query_3d, query_scores_2d
from .raster import render
from .scene import (
    Camera,
    GaussianScene,
    Primitive,
    as_f32_grid,
    make_synthetic_scene,
    quat_normalize,
)
from .tensorio import Codebook
from .trainer import TrainConfig, ViewData

ALPHA_EVAL_CUTOFF = 0.5
PRESET_NAMES = ("two-spheres", "room-plane-boxes", "flat-plane")


@dataclass
class Preset:
    name: str
    gt_scene: GaussianScene
    labels: np.ndarray
    gt_points: np.ndarray
    gt_point_labels: np.ndarray
    init_scene: GaussianScene
    train_cameras: list
    eval_cameras: list
    codebook: Codebook
    vectors_by_label: dict
    category_by_label: dict
    token_by_label: dict
    fscore_labels: tuple
    config: TrainConfig
    noise_sigma: float = 0.01
    ae_epochs: int = 3000


def _arc_camera(angle: float, radius: float, height: float, width, height_px, fx) -> Camera:
    eye = (radius * np.sin(angle), height, -radius * np.cos(angle))
    return Camera.look_at(
        eye=eye, target=(0.0, 0.0, 0.0), width=width, height=height_px, fx=fx
    )


def _perturbed_init(gt: GaussianScene, seed: int, pos_sigma=0.01, feat_sigma=0.01) -> GaussianScene:
    """Starting scene: noisy positions, random orientations, isotropic scales."""
    rng = np.random.default_rng(seed)
    init = gt.copy()
    init.position = as_f32_grid(gt.position + rng.normal(0.0, pos_sigma, gt.position.shape))
    init.rotation = as_f32_grid(quat_normalize(rng.normal(size=(gt.count, 4))))
    iso = gt.log_scale.mean(axis=1, keepdims=True)
    init.log_scale = as_f32_grid(np.repeat(iso, 3, axis=1))
    init.opacity_logit = as_f32_grid(np.full(gt.count, np.log(0.8 / 0.2)))
    init.color = as_f32_grid(np.full((gt.count, 3), 0.5))
    init.f_lang = as_f32_grid(rng.normal(0.0, feat_sigma, (gt.count, 3)))
    init.f_ins = np.zeros((gt.count, 3))
    init.validate()
    return init


def two_spheres(seed: int = 7) -> Preset:
    """Two colored spheres in empty space, queried by color token."""
    prims = [
        Primitive(kind="sphere", label=1, color=(0.85, 0.15, 0.10),
                  center=(-0.45, 0.0, 0.0), size=(0.3,), n_gaussians=420, n_points=900),
        Primitive(kind="sphere", label=2, color=(0.10, 0.80, 0.20),
                  center=(0.45, 0.0, 0.0), size=(0.3,), n_gaussians=420, n_points=900),
    ]
    gt, labels, points, point_labels = make_synthetic_scene(prims, seed=seed)
    d = 8
    e = np.eye(d)
    bg_query = -(e[0] + e[1] + e[2]) / np.sqrt(3.0)
    codebook = Codebook(
        tokens=["red-ball", "green-ball", "background"],
        vectors=np.stack([e[0], e[1], bg_query]),
    )
    train_angles = np.linspace(-0.7, 0.7, 10)
    eval_angles = np.array([-0.45, 0.55])
    train_cams = [
        _arc_camera(a, 2.5, 0.45 * np.sin(3.0 * a), 64, 64, 70.0) for a in train_angles
    ]
    eval_cams = [_arc_camera(a, 2.5, 0.15, 64, 64, 70.0) for a in eval_angles]
    return Preset(
        name="two-spheres",
        gt_scene=gt,
        labels=labels,
        gt_points=points,
        gt_point_labels=point_labels,
        init_scene=_perturbed_init(gt, seed + 1),
        train_cameras=train_cams,
        eval_cameras=eval_cams,
        codebook=codebook,
        vectors_by_label={0: np.zeros(d), 1: e[0], 2: e[1]},
        category_by_label={1: 1, 2: 2},
        token_by_label={1: "red-ball", 2: "green-ball"},
        fscore_labels=(1, 2),
        config=TrainConfig(stage1_iters=500, stage2_iters=1000, stage3_iters=500, seed=seed),
    )


def room_plane_boxes(seed: int = 0) -> Preset:
    """A floor plane and two crates that share a category at the coarse level."""
    floor_q = (np.cos(-np.pi / 4), np.sin(-np.pi / 4), 0.0, 0.0)  # +z normal -> +y
    prims = [
        Primitive(kind="plane", label=1, color=(0.55, 0.45, 0.30), center=(0.0, -0.5, 0.0),
                  size=(3.0, 3.0), rotation=floor_q, n_gaussians=600, n_points=600),
        Primitive(kind="box", label=2, color=(0.75, 0.55, 0.25), center=(-0.4, -0.25, 0.1),
                  size=(0.2, 0.25, 0.2), category=2, n_gaussians=250, n_points=400),
        Primitive(kind="box", label=3, color=(0.70, 0.50, 0.20), center=(0.5, -0.3, -0.2),
                  size=(0.15, 0.2, 0.15), category=2, n_gaussians=200, n_points=300),
    ]
    gt, labels, points, point_labels = make_synthetic_scene(
        prims, seed=seed, tangent_scale=0.1
    )
    d = 8
    e = np.eye(d)
    codebook = Codebook(
        tokens=["wood-floor", "crate", "background"],
        vectors=np.stack([e[0], e[1], -(e[0] + e[1] + e[2]) / np.sqrt(3.0)]),
    )
    angles = np.linspace(-0.2, 0.2, 8)
    train_cams = [
        Camera.look_at(
            eye=(2.4 * np.sin(a), 0.9, -2.4 * np.cos(a)), target=(0.0, -0.3, 0.0),
            width=48, height=48, fx=45.0,
        )
        for a in angles
    ]
    eval_cams = [
        Camera.look_at(eye=(2.4 * np.sin(a), 0.85, -2.4 * np.cos(a)), target=(0.0, -0.3, 0.0),
                       width=48, height=48, fx=45.0)
        for a in (-0.12, 0.14)
    ]
    return Preset(
        name="room-plane-boxes",
        gt_scene=gt,
        labels=labels,
        gt_points=points,
        gt_point_labels=point_labels,
        init_scene=_perturbed_init(gt, seed + 1),
        train_cameras=train_cams,
        eval_cameras=eval_cams,
        codebook=codebook,
        vectors_by_label={0: np.zeros(d), 1: e[0], 2: e[1], 3: e[1]},
        category_by_label={1: 1, 2: 2, 3: 2},
        token_by_label={1: "wood-floor", 2: "crate", 3: "crate"},
        fscore_labels=(2, 3),
        config=TrainConfig(stage1_iters=300, stage2_iters=600, stage3_iters=300, seed=seed),
    )


def flat_plane(seed: int = 0) -> Preset:
    """Isotropic splats on a plane; geometry training should flatten them.

    The starting scene is the ground truth itself, so photometric error
    starts near zero and the flatness term does the visible work.
    """
    prims = [
        Primitive(kind="plane", label=1, color=(0.6, 0.6, 0.62), center=(0.0, 0.0, 0.0),
                  size=(1.5, 1.5), n_gaussians=160, n_points=64),
    ]
    gt, labels, points, point_labels = make_synthetic_scene(
        prims, seed=seed, tangent_scale=0.08, flatten_ratio=1.0
    )
    d = 8
    e = np.eye(d)
    cams = [
        Camera.look_at(eye=(0.5 * np.sin(a), 0.2, -2.0 * np.cos(a)), target=(0, 0, 0),
                       width=32, height=32, fx=30.0)
        for a in (-0.15, 0.0, 0.15)
    ]
    return Preset(
        name="flat-plane",
        gt_scene=gt,
        labels=labels,
        gt_points=points,
        gt_point_labels=point_labels,
        init_scene=gt.copy(),
        train_cameras=cams,
        eval_cameras=cams[:1],
        codebook=Codebook(tokens=["plane"], vectors=e[0:1]),
        vectors_by_label={0: np.zeros(d), 1: e[0]},
        category_by_label={1: 1},
        token_by_label={1: "plane"},
        fscore_labels=(1,),
        config=TrainConfig(stage1_iters=500, stage2_iters=0, stage3_iters=0, seed=seed),
    )


def get_preset(name: str, seed: int | None = None) -> Preset:
    if name == "two-spheres":
        return two_spheres(7 if seed is None else seed)
    if name == "room-plane-boxes":
        return room_plane_boxes(0 if seed is None else seed)
    if name == "flat-plane":
        return flat_plane(0 if seed is None else seed)
    raise InvalidParameterError(f"unknown preset {name!r}; choices: {PRESET_NAMES}")


# ---------------------------------------------------------------------------
# supervision

def ordered_map(fn, items, workers: int):
    """Index-ordered map, threaded when workers > 1. Work must be pure."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def stratified_feature_samples(pooled_all, masks_all, sample_cap: int = 8192, seed: int = 0):
    """Training rows for the latent compressor, one per pooled region.

    One sample per region keeps rare objects from drowning in background
    pixels; a matched handful of raw background rows pins zero near zero.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for pooled, masks in zip(pooled_all, masks_all):
        for h in HIERARCHIES:
            arr = pooled.high_dim[h].reshape(-1, pooled.high_dim[h].shape[-1])
            ids = masks.level(h).reshape(-1)
            for mid in np.unique(ids):
                rows = np.nonzero(ids == mid)[0]
                if mid == 0:
                    take = rows[rng.integers(0, len(rows), size=min(2, len(rows)))]
                    samples.extend(arr[take])
                else:
                    samples.append(arr[rows[0]])  # constant within the region
    samples = np.asarray(samples)
    if len(samples) > sample_cap:
        pick = rng.choice(len(samples), sample_cap, replace=False)
        samples = samples[pick]
    return samples


def build_view_data(
    preset: Preset,
    model: Autoencoder | None = None,
    sample_cap: int = 8192,
    ae_seed: int = 0,
    workers: int = 1,
):
    """Render targets and synthetic supervision for every train camera.

    Returns (views, model). When no latent model is given, one is fit on
    pooled features gathered across all views and hierarchy levels.
    """

    def one_view(item):
        i, cam = item
        out = render(preset.gt_scene, cam, channels="color")
        feat, masks, _ = make_synthetic_features(
            preset.gt_scene,
            preset.labels,
            cam,
            preset.vectors_by_label,
            noise_sigma=preset.noise_sigma,
            seed=1000 + i,
            category_by_label=preset.category_by_label,
        )
        return out.color, hierarchical_mask_pool(feat, masks), masks

    per_view = ordered_map(one_view, list(enumerate(preset.train_cameras)), workers)
    rgbs = [rgb for rgb, _, _ in per_view]
    pooled_all = [pooled for _, pooled, _ in per_view]
    masks_all = [masks for _, _, masks in per_view]

    if model is None:
        samples = stratified_feature_samples(pooled_all, masks_all, sample_cap, ae_seed)
        model = ae_train(samples, epochs=preset.ae_epochs, seed=ae_seed)

    views = []
    for cam, rgb, pooled, masks in zip(preset.train_cameras, rgbs, pooled_all, masks_all):
        encode_pooled(pooled, model)
        views.append(ViewData(camera=cam, rgb=rgb, masks=masks, latent=pooled.latent))
    return views, model


def gt_label_map(gt_scene: GaussianScene, labels: np.ndarray, camera: Camera) -> np.ndarray:
    """Per-pixel ground-truth label, 0 where nothing solid renders."""
    out = render(gt_scene, camera, channels="color")
    amax = out.argmax
    lm = np.where(amax >= 0, np.asarray(labels, dtype=np.int32)[np.maximum(amax, 0)], 0)
    lm[out.alpha < ALPHA_EVAL_CUTOFF] = 0
    return lm.astype(np.int32)


# ---------------------------------------------------------------------------
# evaluation protocol

def evaluate_semantics(
    scene: GaussianScene,
    model: Autoencoder,
    codebook: Codebook,
    preset: Preset,
    threshold_floor: float = 0.5,
    workers: int = 1,
) -> dict:
    """Per-pixel query assignment vs ground truth over the eval cameras."""
    query_labels = sorted(preset.token_by_label)
    tokens = [preset.token_by_label[lab] for lab in query_labels]

    def one_camera(cam):
        out = render(scene, cam, channels="lang")
        stack = np.stack(
            [query_scores_2d(out.feature, model, codebook, tok) for tok in tokens]
        )
        stack[:, out.alpha < ALPHA_EVAL_CUTOFF] = 0.0
        pred = assign_argmax(stack, floor=threshold_floor)
        gt_map = gt_label_map(preset.gt_scene, preset.labels, cam)
        gt_idx = np.full(gt_map.shape, -1, dtype=np.int32)
        for qi, lab in enumerate(query_labels):
            gt_idx[gt_map == lab] = qi
        query_ids = list(range(len(tokens)))
        return mean_iou(pred, gt_idx, query_ids), mean_acc(pred, gt_idx, query_ids)

    pairs = ordered_map(one_camera, preset.eval_cameras, workers)
    ious = [p[0] for p in pairs]
    accs = [p[1] for p in pairs]
    return {
        "miou": float(np.mean(ious)),
        "macc": float(np.mean(accs)),
        "per_view_iou": ious,
        "tokens": tokens,
    }


def evaluate_fscore(
    scene: GaussianScene,
    model: Autoencoder,
    codebook: Codebook,
    preset: Preset,
    threshold: float = 0.6,
    tau: float = 0.05,
) -> dict:
    """3D selection quality: matched centers vs labeled surface points."""
    rows = []
    for lab in preset.fscore_labels:
        token = preset.token_by_label[lab]
        _, sel = query_3d(scene, model, codebook, token, threshold)
        gt_pts = preset.gt_points[preset.gt_point_labels == lab]
        if not sel.any():
            rows.append((token, 0.0, "query matched no gaussians"))
            continue
        score = semantic_fscore(scene.position[sel], gt_pts, tau=tau)
        rows.append((token, score.fscore, ""))
    mean_f = float(np.mean([r[1] for r in rows])) if rows else 0.0
    return {"fscore_mean": mean_f, "rows": rows}
