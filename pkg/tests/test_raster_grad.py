"""Analytic backward pass against central finite differences.

The loss is a fixed random linear functional of every rendered map, which
exercises all gradient paths at once with arbitrary per-pixel weights.
"""

from __future__ import annotations

import numpy as np
import pytest

from langfield.raster import render, render_backward
from langfield.scene import PARAM_NAMES

from conftest import build_gradcheck_scene
from oracles import fd_gradient, rel_err

FD_H = 1e-4
TOL = 1e-3


@pytest.fixture(scope="module")
def setup():
    scene, cam = build_gradcheck_scene()
    g = np.random.default_rng(11)
    grad_maps = {
        "color": g.normal(size=(8, 8, 3)),
        "feature": g.normal(size=(8, 8, 3)),
        "feature_ins": g.normal(size=(8, 8, 3)),
        "depth": g.normal(size=(8, 8)),
        "normal": g.normal(size=(8, 8, 3)),
        "alpha": g.normal(size=(8, 8)),
    }
    return scene, cam, grad_maps


def _loss(scene, cam, grad_maps):
    out = render(scene, cam, channels="all")
    return (
        float((grad_maps["color"] * out.color).sum())
        + float((grad_maps["feature"] * out.feature).sum())
        + float((grad_maps["feature_ins"] * out.feature_ins).sum())
        + float((grad_maps["depth"] * out.depth).sum())
        + float((grad_maps["normal"] * out.normal).sum())
        + float((grad_maps["alpha"] * out.alpha).sum())
    )


def test_fixture_avoids_nonsmooth_boundaries(setup):
    # documents why finite differences are trustworthy on this fixture
    scene, cam, _ = setup
    out = render(scene, cam, channels="all")
    ctx = out.ctx
    assert ctx.alpha.min() > 2.5 / 255.0  # far above the skip threshold
    assert ctx.alpha.max() < 0.7  # far below the 0.99 cap
    assert ctx.T.min() > 1e-3  # far above the early-exit threshold
    assert len(ctx.pix) == scene.count * 64  # every footprint covers the image
    # depth gaps and normal alignment margins
    assert np.diff(np.sort(ctx.z)).min() > 0.1
    dots = np.abs(np.einsum("ij,ij->i", ctx.n_view, ctx.t_cam))
    assert dots.min() > 0.05
    # scale channels stay well separated so argmin cannot flip
    ls = np.sort(scene.log_scale, axis=1)
    assert np.min(ls[:, 1] - ls[:, 0]) > 0.1


@pytest.mark.parametrize("param", PARAM_NAMES)
def test_backward_matches_fd(setup, param):
    scene, cam, grad_maps = setup
    out = render(scene, cam, channels="all")
    grads = render_backward(out, grad_maps)
    analytic = getattr(grads, param)

    def fn(arr):
        s2 = scene.copy()
        setattr(s2, param, arr.copy())
        return _loss(s2, cam, grad_maps)

    fd = fd_gradient(fn, getattr(scene, param).copy(), h=FD_H)
    assert rel_err(analytic, fd) < TOL


def test_gradient_completeness(setup):
    # every parameter that moves the forward output gets a gradient
    scene, cam, grad_maps = setup
    out = render(scene, cam, channels="all")
    grads = render_backward(out, grad_maps)
    for param in PARAM_NAMES:
        arr = getattr(grads, param)
        per_g = np.abs(arr).reshape(scene.count, -1).max(axis=1)
        assert (per_g > 0).all(), f"{param} has a dead gradient"


def test_partial_grad_maps(setup):
    # missing keys are zeros; color-only grads leave features untouched
    scene, cam, grad_maps = setup
    out = render(scene, cam, channels="all")
    grads = render_backward(out, {"color": grad_maps["color"]})
    assert not grads.f_lang.any()
    assert not grads.f_ins.any()
    assert grads.position.any()

    def fn(arr):
        s2 = scene.copy()
        s2.position = arr.copy()
        out2 = render(s2, cam, channels="all")
        return float((grad_maps["color"] * out2.color).sum())

    fd = fd_gradient(fn, scene.position.copy(), h=FD_H)
    assert rel_err(grads.position, fd) < TOL


def test_backward_empty_scene():
    from langfield.scene import Camera, GaussianScene

    cam = Camera(width=4, height=4, fx=4, fy=4, cx=1.5, cy=1.5, world_to_camera=np.eye(4))
    out = render(GaussianScene.empty(0), cam)
    grads = render_backward(out, {"color": np.zeros((4, 4, 3))})
    assert grads.position.shape == (0, 3)
