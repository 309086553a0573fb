"""Shared fixtures.

The gradcheck scene is built so finite differences stay clean: footprints
cover the whole image (no pixel sits near the 1/255 skip threshold), alphas
stay far below the 0.99 cap, transmittance stays far above the 1e-4 exit,
scale channels are well separated so argmin never flips, depths are spaced
so sort order never flips, and normals are nowhere edge-on.
"""

from __future__ import annotations

import numpy as np
import pytest

from langfield.scene import Camera, GaussianScene, quat_normalize


def build_gradcheck_scene(n: int = 5, seed: int = 3) -> tuple[GaussianScene, Camera]:
    rng = np.random.default_rng(seed)
    z = 2.2 + 0.6 * np.arange(n)
    pos = np.zeros((n, 3))
    pos[:, 0] = rng.uniform(-0.25, 0.25, n)
    pos[:, 1] = rng.uniform(-0.25, 0.25, n)
    pos[:, 2] = z
    quat = quat_normalize(rng.normal(size=(n, 4)))
    s_base = 2.5 * z / 6.0
    ratios = np.array([1.1, 0.95, 0.72])
    jitter = rng.uniform(0.97, 1.03, (n, 3))
    log_scale = np.log(s_base[:, None] * ratios[None, :] * jitter)
    scene = GaussianScene(
        position=pos,
        rotation=quat,
        log_scale=log_scale,
        opacity_logit=rng.uniform(-0.6, 0.2, n),
        color=rng.uniform(0.2, 0.8, (n, 3)),
        f_lang=rng.uniform(-0.8, 0.8, (n, 3)),
        f_ins=rng.uniform(-0.8, 0.8, (n, 3)),
    )
    cam = Camera(width=8, height=8, fx=6.0, fy=6.0, cx=3.5, cy=3.5, world_to_camera=np.eye(4))
    return scene, cam


@pytest.fixture
def gradcheck_scene():
    return build_gradcheck_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
