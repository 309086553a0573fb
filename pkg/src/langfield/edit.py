"""Language-driven scene edits: object removal and transplant.

Removal selects Gaussians by query, wraps their centers in a convex
hull, and deletes every center inside it, so stragglers of the same
object that scored under the threshold still go away. Transplant copies
a selection into another scene under a similarity transform.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DegenerateHullError, InvalidParameterError, NoMatchError
from .hcam import Autoencoder
from .hull import convex_hull, hull_contains
from .query import QUERY_THRESHOLD, query_3d
from .scene import (
    GaussianScene,
    as_f32_grid,
    quat_multiply,
    quat_normalize,
    quat_to_rotmat,
)
from .tensorio import Codebook


def remove_object(
    scene: GaussianScene,
    model: Autoencoder,
    codebook: Codebook,
    token: str,
    threshold: float = QUERY_THRESHOLD,
):
    """Returns (edited_scene, manifest); the input scene is left untouched.

    If the matched centers span no volume the hull step is skipped and
    only the matched Gaussians are deleted.
    """
    scores, selected = query_3d(scene, model, codebook, token, threshold)
    if not selected.any():
        raise NoMatchError(f"query {token!r} matched nothing at threshold {threshold}")
    try:
        hull = convex_hull(scene.position[selected])
        remove = hull_contains(hull, scene.position)
        remove |= selected
    except DegenerateHullError:
        remove = selected
    removed_ids = np.nonzero(remove)[0]
    edited = scene.select(~remove)
    manifest = {
        "operation": "remove",
        "query": token,
        "threshold": float(threshold),
        "matched": int(selected.sum()),
        "removed_ids": [int(i) for i in removed_ids],
        "remaining": int(edited.count),
    }
    return edited, manifest


def transform_gaussians(
    part: GaussianScene,
    rotation=(1.0, 0.0, 0.0, 0.0),
    translation=(0.0, 0.0, 0.0),
    scale: float = 1.0,
) -> GaussianScene:
    """Similarity transform: p -> scale * R p + t, with covariances in tow.

    rotation is a quaternion; scale folds into log_scale so anisotropy is
    preserved. Appearance and feature channels are untouched.
    """
    if scale <= 0 or not np.isfinite(scale):
        raise InvalidParameterError(f"scale must be positive, got {scale}")
    q_t = quat_normalize(np.asarray(rotation, dtype=np.float64).reshape(1, 4))
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(t)):
        raise InvalidParameterError("translation must be finite")
    R = quat_to_rotmat(q_t)[0]
    out = part.copy()
    out.position = as_f32_grid(scale * (part.position @ R.T) + t)
    out.rotation = as_f32_grid(quat_normalize(quat_multiply(np.broadcast_to(q_t, part.rotation.shape), part.rotation)))
    out.log_scale = as_f32_grid(part.log_scale + np.log(scale))
    out.validate()
    return out


def transplant_object(
    source: GaussianScene,
    target: GaussianScene,
    model: Autoencoder,
    codebook: Codebook,
    token: str,
    threshold: float = QUERY_THRESHOLD,
    rotation=(1.0, 0.0, 0.0, 0.0),
    translation=(0.0, 0.0, 0.0),
    scale: float = 1.0,
):
    """Copy the matched object from source into target. Returns (scene, manifest)."""
    scores, selected = query_3d(source, model, codebook, token, threshold)
    if not selected.any():
        raise NoMatchError(f"query {token!r} matched nothing at threshold {threshold}")
    part = transform_gaussians(source.select(selected), rotation, translation, scale)
    edited = GaussianScene.concatenate(target, part)
    manifest = {
        "operation": "transplant",
        "query": token,
        "threshold": float(threshold),
        "matched": int(selected.sum()),
        "added_ids": list(range(target.count, target.count + part.count)),
        "remaining": int(edited.count),
    }
    return edited, manifest


def save_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
