"""Feature ingestion: mask-pooled feature images and the latent autoencoder.

High-dimensional per-pixel features are averaged inside each mask of a
three-level hierarchy (s, m, l), then compressed to 3 channels by a linear
autoencoder so they can ride through the rasterizer. Pixels with mask id 0
keep their raw features.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import FormatError, InvalidParameterError, ShapeError, TokenLookupError
from .raster import render
from .scene import Camera, GaussianScene, as_f32_grid
from .tensorio import load_tensor, save_tensor

HIERARCHIES = ("s", "m", "l")

LATENT_DIM = 3


@dataclass
class FeatureImage:
    data: NDArray[np.float64]  # (H, W, D)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"feature image must be (H, W, D), got {self.data.shape}")
        if self.data.shape[2] < LATENT_DIM:
            raise InvalidParameterError(f"feature dim must be >= {LATENT_DIM}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("feature image contains non-finite values")

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def load_feature_image(path: str | Path) -> FeatureImage:
    arr = load_tensor(path)
    if arr.dtype != np.float32 or arr.ndim != 3:
        raise FormatError(f"{path}: feature image must be a rank-3 float32 tensor")
    return FeatureImage(data=arr.astype(np.float64))


def save_feature_image(path: str | Path, image: FeatureImage) -> None:
    save_tensor(path, image.data.astype(np.float32))


def densify_ids(mask: np.ndarray) -> np.ndarray:
    """Remap nonzero ids onto 1..K preserving order; 0 stays unassigned."""
    mask = np.asarray(mask)
    ids = np.unique(mask)
    ids = ids[ids > 0]
    out = np.zeros(mask.shape, dtype=np.int32)
    for new, old in enumerate(ids, start=1):
        out[mask == old] = new
    return out


@dataclass
class MaskSet:
    s: NDArray[np.int32]  # (H, W) per-part ids
    m: NDArray[np.int32]  # (H, W) per-object ids
    l: NDArray[np.int32]  # (H, W) per-category ids

    def __post_init__(self):
        shapes = {self.s.shape, self.m.shape, self.l.shape}
        if len(shapes) != 1 or self.s.ndim != 2:
            raise ShapeError("mask hierarchy levels must share one (H, W) shape")

    def level(self, h: str) -> np.ndarray:
        if h not in HIERARCHIES:
            raise InvalidParameterError(f"hierarchy must be one of {HIERARCHIES}, got {h!r}")
        return getattr(self, h)


def load_mask_set(path_s: str | Path, path_m: str | Path, path_l: str | Path) -> MaskSet:
    levels = []
    for p in (path_s, path_m, path_l):
        arr = load_tensor(p)
        if arr.dtype != np.int32 or arr.ndim != 2:
            raise FormatError(f"{p}: mask must be a rank-2 int32 tensor")
        if arr.min() < 0:
            raise FormatError(f"{p}: mask ids must be non-negative")
        levels.append(densify_ids(arr))
    return MaskSet(s=levels[0], m=levels[1], l=levels[2])


def save_mask_set(path_s, path_m, path_l, masks: MaskSet) -> None:
    save_tensor(path_s, masks.s.astype(np.int32))
    save_tensor(path_m, masks.m.astype(np.int32))
    save_tensor(path_l, masks.l.astype(np.int32))


@dataclass
class PooledFeatureImage:
    high_dim: dict  # hierarchy -> (H, W, D) mask-averaged features
    latent: dict | None = None  # hierarchy -> (H, W, 3) encoded targets


def _pool_level(feature: np.ndarray, mask: np.ndarray) -> np.ndarray:
    h, w, d = feature.shape
    out = feature.copy()
    flat_mask = mask.reshape(-1)
    flat = feature.reshape(-1, d)
    k = int(flat_mask.max()) if flat_mask.size else 0
    if k == 0:
        return out
    counts = np.bincount(flat_mask, minlength=k + 1).astype(np.float64)
    sums = np.zeros((k + 1, d))
    np.add.at(sums, flat_mask, flat)
    means = sums[1:] / np.maximum(counts[1:, None], 1.0)
    assigned = flat_mask > 0
    out.reshape(-1, d)[assigned] = means[flat_mask[assigned] - 1]
    return out


def hierarchical_mask_pool(feature: FeatureImage, masks: MaskSet) -> PooledFeatureImage:
    if masks.s.shape != feature.data.shape[:2]:
        raise ShapeError(
            f"mask shape {masks.s.shape} does not match feature image {feature.data.shape[:2]}"
        )
    return PooledFeatureImage(
        high_dim={h: _pool_level(feature.data, masks.level(h)) for h in HIERARCHIES}
    )


# ---------------------------------------------------------------------------
# autoencoder

@dataclass
class Autoencoder:
    enc_w: NDArray[np.float64]  # (D, 3)
    enc_b: NDArray[np.float64]  # (3,)
    dec_w: NDArray[np.float64]  # (3, D)
    dec_b: NDArray[np.float64]  # (D,)
    loss_history: list | None = None

    @property
    def dim(self) -> int:
        return self.enc_w.shape[0]

    @property
    def final_loss(self) -> float:
        if not self.loss_history:
            raise InvalidParameterError("autoencoder has no training history")
        return float(self.loss_history[-1])

    @classmethod
    def identity(cls) -> "Autoencoder":
        eye = np.eye(LATENT_DIM)
        return cls(enc_w=eye.copy(), enc_b=np.zeros(LATENT_DIM),
                   dec_w=eye.copy(), dec_b=np.zeros(LATENT_DIM))

    @classmethod
    def random(cls, dim: int, seed: int = 0) -> "Autoencoder":
        if dim < LATENT_DIM:
            raise InvalidParameterError(f"feature dim must be >= {LATENT_DIM}")
        rng = np.random.default_rng(seed)
        return cls(
            enc_w=rng.normal(0, 1 / np.sqrt(dim), (dim, LATENT_DIM)),
            enc_b=np.zeros(LATENT_DIM),
            dec_w=rng.normal(0, 1 / np.sqrt(LATENT_DIM), (LATENT_DIM, dim)),
            dec_b=np.zeros(dim),
        )

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dim {self.dim}, got {x.shape[-1]}")
        return x @ self.enc_w + self.enc_b

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != LATENT_DIM:
            raise ShapeError(f"expected trailing dim {LATENT_DIM}, got {z.shape[-1]}")
        return z @ self.dec_w + self.dec_b


def ae_train(
    samples: np.ndarray,
    epochs: int = 200,
    lr: float = 0.05,
    model: Autoencoder | None = None,
    seed: int = 0,
) -> Autoencoder:
    """Full-batch gradient descent on mean squared reconstruction error.

    Starts from the identity when D == 3, otherwise from a seeded random
    init (or the given model). loss_history[0] is the pre-training loss.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be (S, D), got {samples.shape}")
    s, d = samples.shape
    if s == 0:
        raise InvalidParameterError("cannot train on zero samples")
    if s < 4:
        raise InvalidParameterError(f"need at least 4 samples, got {s}")
    if d < LATENT_DIM:
        raise InvalidParameterError(f"feature dim must be >= {LATENT_DIM}")
    if not np.all(np.isfinite(samples)):
        raise InvalidParameterError("samples contain non-finite values")
    if model is None:
        model = Autoencoder.identity() if d == LATENT_DIM else Autoencoder.random(d, seed)
    ew, eb = model.enc_w.copy(), model.enc_b.copy()
    dw, db = model.dec_w.copy(), model.dec_b.copy()

    def loss_of():
        r = (samples @ ew + eb) @ dw + db - samples
        return float(np.mean(r * r))

    history = [loss_of()]
    denom = s * d
    for _ in range(epochs):
        z = samples @ ew + eb
        r = z @ dw + db - samples
        g_y = (2.0 / denom) * r
        g_dw = z.T @ g_y
        g_db = g_y.sum(axis=0)
        g_z = g_y @ dw.T
        g_ew = samples.T @ g_z
        g_eb = g_z.sum(axis=0)
        ew -= lr * g_ew
        eb -= lr * g_eb
        dw -= lr * g_dw
        db -= lr * g_db
        history.append(loss_of())
    # land on the float32 grid so directory round-trips are bit-faithful
    return Autoencoder(
        enc_w=as_f32_grid(ew), enc_b=as_f32_grid(eb),
        dec_w=as_f32_grid(dw), dec_b=as_f32_grid(db),
        loss_history=history,
    )


_AE_FILES = ("enc_w", "enc_b", "dec_w", "dec_b")


def save_autoencoder(directory: str | Path, model: Autoencoder) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _AE_FILES:
        save_tensor(directory / f"{name}.lstf", getattr(model, name).astype(np.float32))


def load_autoencoder(directory: str | Path) -> Autoencoder:
    directory = Path(directory)
    arrays = {}
    for name in _AE_FILES:
        p = directory / f"{name}.lstf"
        if not p.exists():
            raise FormatError(f"{directory}: missing autoencoder tensor {name}.lstf")
        arrays[name] = load_tensor(p).astype(np.float64)
    model = Autoencoder(**arrays)
    if model.enc_w.shape != (model.dim, LATENT_DIM) or model.dec_w.shape != (LATENT_DIM, model.dim):
        raise FormatError(f"{directory}: inconsistent autoencoder shapes")
    return model


def encode_pooled(pooled: PooledFeatureImage, model: Autoencoder) -> PooledFeatureImage:
    """Attach per-hierarchy 3-channel latent target maps."""
    pooled.latent = {h: model.encode(arr) for h, arr in pooled.high_dim.items()}
    return pooled


# ---------------------------------------------------------------------------
# synthetic features

def make_synthetic_features(
    scene: GaussianScene,
    labels: np.ndarray,
    camera: Camera,
    vectors_by_label: dict,
    noise_sigma: float = 0.0,
    seed: int = 0,
    category_by_label: dict | None = None,
):
    """Render per-pixel ground-truth labels and emit codebook features.

    The label at a pixel is the label of the max-weight Gaussian there
    (0 where nothing renders). Features are the label's codebook vector
    plus seeded Gaussian pixel noise. Returns (FeatureImage, MaskSet,
    label_map).
    """
    labels = np.asarray(labels, dtype=np.int32)
    if labels.shape != (scene.count,):
        raise ShapeError(f"labels must be ({scene.count},), got {labels.shape}")
    out = render(scene, camera, channels="color")
    amax = out.argmax
    label_map = np.where(amax >= 0, labels[np.maximum(amax, 0)], 0).astype(np.int32)

    present = np.unique(label_map)
    for lab in present:
        if int(lab) not in vectors_by_label:
            raise TokenLookupError(f"label {int(lab)} has no codebook vector")
    dims = {len(np.atleast_1d(vectors_by_label[int(lab)])) for lab in vectors_by_label}
    if len(dims) != 1:
        raise InvalidParameterError("codebook vectors must share one dimension")
    d = dims.pop()

    max_label = int(max(int(k) for k in vectors_by_label))
    table = np.zeros((max_label + 1, d))
    for lab, vec in vectors_by_label.items():
        table[int(lab)] = np.asarray(vec, dtype=np.float64)
    feat = table[label_map]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        feat = feat + rng.normal(0.0, noise_sigma, feat.shape)

    level_m = densify_ids(label_map)
    if category_by_label is None:
        category_by_label = {}
    cat_map = np.zeros_like(label_map)
    for lab in present:
        if lab == 0:
            continue
        cat_map[label_map == lab] = int(category_by_label.get(int(lab), int(lab)))
    level_l = densify_ids(cat_map)
    # parts: connected components within each object
    level_s = np.zeros_like(label_map)
    next_id = 0
    for lab in present:
        if lab == 0:
            continue
        comp, n = ndimage.label(label_map == lab)
        level_s[comp > 0] = comp[comp > 0] + next_id
        next_id += n
    return FeatureImage(data=feat), MaskSet(s=level_s.astype(np.int32), m=level_m, l=level_l), label_map
