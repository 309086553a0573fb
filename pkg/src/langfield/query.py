"""Open-vocabulary queries against rendered latents or scene features.

Latent features (rendered maps or per-Gaussian vectors) are decoded back
to the embedding dimension, scored by cosine similarity against a
codebook entry, and mapped to [0, 1]. Selection and localization both
run on those scores.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .hcam import Autoencoder
from .scene import GaussianScene
from .tensorio import Codebook

QUERY_THRESHOLD = 0.6
LOCALIZE_SIZE = 20


def relevancy(decoded: np.ndarray, query_vector: np.ndarray) -> np.ndarray:
    """Map cosine similarity to [0, 1]; zero-norm decoded vectors score 0."""
    decoded = np.asarray(decoded, dtype=np.float64)
    q = np.asarray(query_vector, dtype=np.float64)
    if decoded.shape[-1] != q.shape[0]:
        raise ShapeError(f"decoded dim {decoded.shape[-1]} != query dim {q.shape[0]}")
    qn = np.linalg.norm(q)
    if qn < 1e-12:
        raise InvalidParameterError("query embedding has zero norm")
    q = q / qn
    norms = np.linalg.norm(decoded, axis=-1)
    live = norms > 1e-12
    cos = (decoded @ q) / np.where(live, norms, 1.0)
    return np.where(live, 0.5 * (cos + 1.0), 0.0)


def query_scores_2d(
    feature_map: np.ndarray, model: Autoencoder, codebook: Codebook, token: str
) -> np.ndarray:
    """Per-pixel relevancy of a rendered latent map for one codebook token."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if feature_map.ndim != 3:
        raise ShapeError(f"expected (H, W, C) latent map, got {feature_map.shape}")
    h, w, c = feature_map.shape
    decoded = model.decode(feature_map.reshape(h * w, c)).reshape(h, w, -1)
    return relevancy(decoded, codebook.vector_for(token))


def query_2d(
    feature_map: np.ndarray,
    model: Autoencoder,
    codebook: Codebook,
    token: str,
    threshold: float = QUERY_THRESHOLD,
):
    """Returns (scores, mask); pixels scoring at or above threshold are selected."""
    scores = query_scores_2d(feature_map, model, codebook, token)
    return scores, scores >= threshold


def query_3d(
    scene: GaussianScene,
    model: Autoencoder,
    codebook: Codebook,
    token: str,
    threshold: float = QUERY_THRESHOLD,
):
    """Returns (scores, mask) over Gaussians, scored on decoded f_lang."""
    decoded = model.decode(scene.f_lang)
    scores = relevancy(decoded, codebook.vector_for(token))
    return scores, scores >= threshold


def box_filter(scores: np.ndarray, size: int = LOCALIZE_SIZE) -> np.ndarray:
    """Edge-clamped mean filter.

    For even sizes the window sits one short of centered: output (r, c)
    averages rows r - (size//2 - 1) .. r + size//2, same for columns.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"expected (H, W) score map, got {scores.shape}")
    if size < 1 or size > max(scores.shape) * 4:
        raise InvalidParameterError(f"bad filter size {size}")
    before = (size - 1) // 2 if size % 2 else size // 2 - 1
    after = size - 1 - before
    padded = np.pad(scores, ((before, after), (before, after)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    return win.mean(axis=(2, 3))


def localize(scores: np.ndarray, size: int = LOCALIZE_SIZE):
    """Smooth the score map and return (filtered, (row, col)) of its peak.

    Ties resolve to the first peak in row-major order.
    """
    filtered = box_filter(scores, size)
    flat = int(np.argmax(filtered))
    return filtered, (flat // filtered.shape[1], flat % filtered.shape[1])


def bbox_hit(location, bbox) -> bool:
    """bbox is (r0, c0, r1, c1), inclusive on all four edges."""
    r0, c0, r1, c1 = bbox
    if r1 < r0 or c1 < c0:
        raise InvalidParameterError(f"empty bbox {bbox!r}")
    r, c = location
    return bool(r0 <= r <= r1 and c0 <= c <= c1)
