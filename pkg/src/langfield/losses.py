"""Training losses with hand-derived gradients.

Map losses return gradients with respect to the rendered maps they consume
(the rasterizer backward chains those to scene parameters); scene losses
return gradients with respect to the parameter arrays directly. Every loss
reports its value and a grads dict keyed by input name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError, ShapeError
from .scene import Camera

SOFTMAX_EPS = 1e-8
PAIR_CAP = 1024


@dataclass
class LossReport:
    name: str
    value: float
    grads: dict


def _check_map(name, arr, shape):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def loss_rgb(rendered: np.ndarray, target: np.ndarray) -> LossReport:
    """Mean absolute error over all pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = _check_map("target", target, rendered.shape)
    diff = rendered - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return LossReport(name="rgb", value=value, grads={"rendered": grad})


def loss_flat(log_scale: np.ndarray) -> LossReport:
    """Mean over Gaussians of exp(min log scale); pushes the thin axis thinner."""
    ls = np.asarray(log_scale, dtype=np.float64)
    if ls.ndim != 2 or ls.shape[1] != 3:
        raise ShapeError(f"log_scale must be (N, 3), got {ls.shape}")
    n = len(ls)
    grad = np.zeros_like(ls)
    if n == 0:
        return LossReport(name="flat", value=0.0, grads={"log_scale": grad})
    axis = np.argmin(ls, axis=1)
    mins = np.exp(ls[np.arange(n), axis])
    grad[np.arange(n), axis] = mins / n
    return LossReport(name="flat", value=float(mins.mean()), grads={"log_scale": grad})


def depth_to_normals(depth: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Normals from central differences of unprojected depth.

    Returns (normals, valid): unit camera-frame normals oriented toward the
    camera and a validity mask (interior pixels with non-degenerate cross
    products). Fronto-parallel surfaces map to (0, 0, -1).
    """
    h, w = depth.shape
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pts = np.empty((h, w, 3))
    pts[..., 0] = depth * (cols - camera.cx) / camera.fx
    pts[..., 1] = depth * (rows - camera.cy) / camera.fy
    pts[..., 2] = depth
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return normals, valid
    dpdc = 0.5 * (pts[1:-1, 2:] - pts[1:-1, :-2])
    dpdr = 0.5 * (pts[2:, 1:-1] - pts[:-2, 1:-1])
    raw = np.cross(dpdc, dpdr)
    norm = np.linalg.norm(raw, axis=2)
    ok = norm > 1e-12
    unit = np.zeros_like(raw)
    unit[ok] = raw[ok] / norm[ok][:, None]
    # orient toward the camera
    toward = np.einsum("ijk,ijk->ij", unit, pts[1:-1, 1:-1])
    unit[toward > 0] *= -1
    normals[1:-1, 1:-1] = unit
    valid[1:-1, 1:-1] = ok
    return normals, valid


def loss_geo(
    normal_map: np.ndarray,
    depth_map: np.ndarray,
    alpha_map: np.ndarray,
    camera: Camera,
) -> LossReport:
    """Alignment of rendered normals with depth-derived normals.

    The depth-derived normal and the alpha mask are treated as constants;
    gradients flow to the rendered normal map only. The rendered normal is
    normalized per pixel before the dot product.
    """
    h, w = depth_map.shape
    normal_map = _check_map("normal_map", normal_map, (h, w, 3))
    alpha_map = _check_map("alpha_map", alpha_map, (h, w))
    n_depth, dvalid = depth_to_normals(np.asarray(depth_map, dtype=np.float64), camera)
    norms = np.linalg.norm(normal_map, axis=2)
    valid = (alpha_map > 0.5) & dvalid & (norms > 1e-8)
    grad = np.zeros_like(normal_map)
    if not valid.any():
        return LossReport(name="geo", value=0.0, grads={"normal": grad})
    n = normal_map[valid]
    m = n_depth[valid]
    ln = norms[valid][:, None]
    nhat = n / ln
    dots = np.einsum("ij,ij->i", nhat, m)
    value = float(np.mean(1.0 - dots))
    count = len(n)
    grad[valid] = -(m - dots[:, None] * nhat) / ln / count
    return LossReport(name="geo", value=value, grads={"normal": grad})


def loss_sem_l2(rendered: np.ndarray, target: np.ndarray) -> LossReport:
    """Mean squared error against the pooled latent target map."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = _check_map("target", target, rendered.shape)
    diff = rendered - target
    value = float(np.mean(diff * diff))
    return LossReport(name="sem_l2", value=value, grads={"rendered": 2.0 * diff / diff.size})


def _sample_pairs(n_pix: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """cap unordered index pairs with distinct endpoints, seeded."""
    out = np.empty((0, 2), dtype=np.int64)
    while len(out) < cap:
        draw = rng.integers(0, n_pix, size=(cap - len(out), 2))
        draw = draw[draw[:, 0] != draw[:, 1]]
        out = np.concatenate([out, draw])
    return out[:cap]


def loss_sg(
    feature_map: np.ndarray,
    mask: np.ndarray,
    pair_cap: int = PAIR_CAP,
    seed: int = 0,
) -> LossReport:
    """Within-mask feature smoothness: mean pair distance per mask, averaged.

    Masks with all pairs up to pair_cap are scanned exhaustively; larger
    ones use a seeded subsample of pair_cap pairs.
    """
    feature_map = np.asarray(feature_map, dtype=np.float64)
    h, w = mask.shape
    _check_map("feature_map", feature_map, (h, w, feature_map.shape[2]))
    flat_feat = feature_map.reshape(-1, feature_map.shape[2])
    flat_mask = np.asarray(mask).reshape(-1)
    grad = np.zeros_like(flat_feat)
    ids = np.unique(flat_mask)
    ids = ids[ids > 0]
    rng = np.random.default_rng(seed)
    total = 0.0
    used = 0
    for mid in ids:
        px = np.flatnonzero(flat_mask == mid)
        npix = len(px)
        if npix < 2:
            continue
        n_all = npix * (npix - 1) // 2
        if n_all <= pair_cap:
            ii, jj = np.triu_indices(npix, k=1)
            pairs = np.stack([px[ii], px[jj]], axis=1)
        else:
            local = _sample_pairs(npix, pair_cap, rng)
            pairs = px[local]
        delta = flat_feat[pairs[:, 0]] - flat_feat[pairs[:, 1]]
        dist = np.linalg.norm(delta, axis=1)
        total += float(dist.mean())
        used += 1
        nz = dist > 1e-12
        unit = np.zeros_like(delta)
        unit[nz] = delta[nz] / dist[nz][:, None]
        scale = 1.0 / len(pairs)
        np.add.at(grad, pairs[:, 0], unit * scale)
        np.add.at(grad, pairs[:, 1], -unit * scale)
    if used == 0:
        return LossReport(name="sg", value=0.0, grads={"rendered": grad.reshape(feature_map.shape)})
    grad /= used
    return LossReport(
        name="sg", value=total / used, grads={"rendered": grad.reshape(feature_map.shape)}
    )


def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbors by position, self excluded."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if not 1 <= k <= n - 1:
        raise InvalidParameterError(f"k must be in [1, {n - 1}], got {k}")
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i]
        out[i] = row[row != i][:k]
    return out


def _softmax(f: np.ndarray) -> np.ndarray:
    e = np.exp(f - f.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return np.maximum(p, SOFTMAX_EPS)


def loss_s3d(
    f_lang: np.ndarray,
    positions: np.ndarray,
    k: int = 8,
    neighbors: np.ndarray | None = None,
) -> LossReport:
    """Mean KL between softmaxed features of spatial neighbors.

    The neighbor graph is treated as a constant: positions receive no
    gradient. Both endpoints of every edge get feature gradients.
    """
    f = np.asarray(f_lang, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != 3:
        raise ShapeError(f"f_lang must be (N, 3), got {f.shape}")
    n = len(f)
    grad = np.zeros_like(f)
    if neighbors is None:
        neighbors = knn_indices(positions, k)
    else:
        neighbors = np.asarray(neighbors, dtype=np.int64)
        if neighbors.shape != (n, k):
            raise ShapeError(f"neighbors must be ({n}, {k}), got {neighbors.shape}")
    p = _softmax(f)  # (N, 3)
    pi = p[:, None, :]  # anchors
    pj = p[neighbors]  # (N, k, 3) neighbors
    log_ratio = np.log(pi) - np.log(pj)
    kl = (pi * log_ratio).sum(axis=2)  # (N, k)
    value = float(kl.mean())
    scale = 1.0 / (n * k)
    # anchor side: p_i * (log_ratio - kl)
    g_anchor = (pi * (log_ratio - kl[..., None])).sum(axis=1) * scale
    grad += g_anchor
    # neighbor side: q - p per edge
    g_edge = (pj - pi) * scale
    np.add.at(grad, neighbors.reshape(-1), g_edge.reshape(-1, 3))
    return LossReport(name="s3d", value=value, grads={"f_lang": grad})


def instance_mean(feature_map: np.ndarray, mask: np.ndarray):
    """Per-mask-id means of a rendered map. Returns (ids, means)."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    flat_feat = feature_map.reshape(-1, feature_map.shape[2])
    flat_mask = np.asarray(mask).reshape(-1)
    if flat_mask.shape[0] != flat_feat.shape[0]:
        raise ShapeError("mask and feature map sizes differ")
    ids = np.unique(flat_mask)
    ids = ids[ids > 0]
    means = np.empty((len(ids), flat_feat.shape[1]))
    for row, mid in enumerate(ids):
        means[row] = flat_feat[flat_mask == mid].mean(axis=0)
    return ids, means


def instance_mean_backward(mask: np.ndarray, ids: np.ndarray, d_means: np.ndarray, channels: int = 3):
    """Spread per-instance mean gradients uniformly over member pixels."""
    flat_mask = np.asarray(mask).reshape(-1)
    grad = np.zeros((flat_mask.shape[0], channels))
    for row, mid in enumerate(ids):
        sel = flat_mask == mid
        grad[sel] = d_means[row] / sel.sum()
    return grad.reshape(mask.shape + (channels,))


def loss_icd(means: np.ndarray, d_min: float = 0.5) -> LossReport:
    """Hinge pushing instance means at least d_min apart."""
    z = np.asarray(means, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"means must be (K, C), got {z.shape}")
    k = len(z)
    grad = np.zeros_like(z)
    if k < 2:
        return LossReport(name="icd", value=0.0, grads={"means": grad})
    ii, jj = np.triu_indices(k, k=1)
    delta = z[ii] - z[jj]
    dist = np.linalg.norm(delta, axis=1)
    margin = d_min - dist
    active = (margin > 0) & (dist > 1e-12)
    value = float(np.maximum(margin, 0.0).mean())
    n_pairs = len(ii)
    unit = np.zeros_like(delta)
    unit[active] = delta[active] / dist[active][:, None]
    contrib = -unit / n_pairs
    np.add.at(grad, ii, contrib)
    np.add.at(grad, jj, -contrib)
    return LossReport(name="icd", value=value, grads={"means": grad})
