import numpy as np
import pytest

from langfield.errors import InvalidParameterError, ShapeError, TokenLookupError
from langfield.hcam import Autoencoder
from langfield.query import (
    bbox_hit,
    box_filter,
    localize,
    query_2d,
    query_3d,
    query_scores_2d,
    relevancy,
)
from langfield.scene import GaussianScene
from langfield.tensorio import Codebook


def make_codebook():
    vecs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    return Codebook(tokens=["sofa", "lamp", "anti"], vectors=vecs)


def test_relevancy_endpoints():
    q = np.array([2.0, 0.0, 0.0])  # normalization happens inside
    decoded = np.array(
        [
            [3.0, 0.0, 0.0],  # aligned
            [-0.5, 0.0, 0.0],  # opposite
            [0.0, 1.0, 0.0],  # orthogonal
            [0.0, 0.0, 0.0],  # dead latent
        ]
    )
    s = relevancy(decoded, q)
    assert np.allclose(s, [1.0, 0.0, 0.5, 0.0], atol=1e-12)


def test_relevancy_rejects_zero_query():
    with pytest.raises(InvalidParameterError):
        relevancy(np.ones((2, 3)), np.zeros(3))


def test_relevancy_shape_mismatch():
    with pytest.raises(ShapeError):
        relevancy(np.ones((2, 4)), np.ones(3))


def test_query_2d_with_identity_model():
    cb = make_codebook()
    model = Autoencoder.identity()
    fmap = np.zeros((2, 3, 3))
    fmap[0, 0] = [1.0, 0.0, 0.0]
    fmap[0, 1] = [0.9, 0.1, 0.0]
    fmap[1, 2] = [-1.0, 0.0, 0.0]
    scores, mask = query_2d(fmap, model, cb, "sofa")
    assert scores.shape == (2, 3)
    assert scores[0, 0] == pytest.approx(1.0)
    assert scores[1, 2] == pytest.approx(0.0)
    assert scores[0, 2] == 0.0  # zero latent
    assert mask[0, 0] and mask[0, 1] and not mask[1, 2]


def test_query_2d_unknown_token():
    with pytest.raises(TokenLookupError):
        query_scores_2d(np.zeros((2, 2, 3)), Autoencoder.identity(), make_codebook(), "piano")


def test_query_3d_selects_matching_gaussians():
    cb = make_codebook()
    scene = GaussianScene.empty(4)
    scene.f_lang[0] = [1.0, 0.0, 0.0]
    scene.f_lang[1] = [0.8, 0.3, 0.0]
    scene.f_lang[2] = [0.0, 0.0, 1.0]
    scene.f_lang[3] = [-2.0, 0.0, 0.0]
    scores, mask = query_3d(scene, Autoencoder.identity(), cb, "sofa", threshold=0.6)
    assert mask.tolist() == [True, True, False, False]
    assert scores[2] == pytest.approx(0.5)


def test_threshold_boundary_is_selected():
    cb = Codebook(tokens=["t"], vectors=np.array([[1.0, 0.0, 0.0]]))
    scene = GaussianScene.empty(1)
    scene.f_lang[0] = [0.0, 1.0, 0.0]  # cosine 0 -> score exactly 0.5
    _, mask = query_3d(scene, Autoencoder.identity(), cb, "t", threshold=0.5)
    assert mask[0]


def box_filter_reference(scores, size):
    h, w = scores.shape
    before = (size - 1) // 2 if size % 2 else size // 2 - 1
    out = np.empty_like(scores, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for dr in range(-before, size - before):
                for dc in range(-before, size - before):
                    rr = min(max(r + dr, 0), h - 1)
                    cc = min(max(c + dc, 0), w - 1)
                    acc += scores[rr, cc]
            out[r, c] = acc / (size * size)
    return out


def test_box_filter_matches_reference():
    rng = np.random.default_rng(4)
    scores = rng.random((13, 11))
    for size in (2, 3, 5, 20):
        got = box_filter(scores, size)
        want = box_filter_reference(scores, size)
        assert np.max(np.abs(got - want)) < 1e-12, size


def test_box_filter_window_anchor():
    # impulse support tells us exactly which outputs see it
    scores = np.zeros((64, 64))
    scores[30, 40] = 1.0
    filtered = box_filter(scores, 20)
    rows, cols = np.nonzero(filtered > 0)
    assert rows.min() == 30 - 10 and rows.max() == 30 + 9
    assert cols.min() == 40 - 10 and cols.max() == 40 + 9
    assert filtered[30, 40] == pytest.approx(1.0 / 400.0)


def test_localize_peak_and_row_major_ties():
    scores = np.zeros((40, 40))
    scores[5:9, 30:34] = 1.0
    filtered, (r, c) = localize(scores, size=4)
    assert filtered.shape == scores.shape
    assert scores[r, c] == 1.0
    tied = np.zeros((30, 30))
    tied[20, 3] = 1.0
    tied[4, 25] = 1.0  # same peak height; earlier row must win
    _, loc = localize(tied, size=2)
    assert loc[0] < 20


def test_localize_constant_map_picks_origin():
    _, loc = localize(np.full((25, 25), 0.3), size=20)
    assert loc == (0, 0)


def test_bbox_hit_inclusive():
    bbox = (2, 3, 6, 8)
    assert bbox_hit((2, 3), bbox)
    assert bbox_hit((6, 8), bbox)
    assert bbox_hit((4, 5), bbox)
    assert not bbox_hit((1, 5), bbox)
    assert not bbox_hit((4, 9), bbox)
    with pytest.raises(InvalidParameterError):
        bbox_hit((0, 0), (5, 5, 4, 6))


def test_box_filter_rejects_bad_input():
    with pytest.raises(ShapeError):
        box_filter(np.zeros((3, 3, 3)))
    with pytest.raises(InvalidParameterError):
        box_filter(np.zeros((5, 5)), size=0)
