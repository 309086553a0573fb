import numpy as np
import pytest

from langfield.errors import InvalidParameterError, ShapeError
from langfield.metrics import (
    ReportRow,
    assign_argmax,
    format_report_table,
    iou,
    mean_acc,
    mean_iou,
    semantic_fscore,
    write_report_csv,
)
from oracles import brute_nn_dist


def test_iou_values():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, :3] = True
    b[0, 1:4] = True
    assert iou(a, b) == pytest.approx(2.0 / 4.0)
    assert iou(a, a) == 1.0
    assert iou(a, np.zeros_like(a)) == 0.0


def test_iou_both_empty_is_one():
    z = np.zeros((3, 3), dtype=bool)
    assert iou(z, z) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))


def test_fscore_hand_case():
    pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 0.04], [5.0, 5.0, 5.0]])
    s = semantic_fscore(pred, gt, tau=0.05)
    assert s.precision == pytest.approx(0.5)
    assert s.recall == pytest.approx(0.5)
    assert s.fscore == pytest.approx(0.5)


def test_fscore_threshold_is_strict():
    pred = np.array([[0.25, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 0.0]])
    s = semantic_fscore(pred, gt, tau=0.25)  # distance == tau exactly
    assert s.fscore == 0.0
    s = semantic_fscore(pred, gt, tau=0.2500001)
    assert s.fscore == 1.0


def test_fscore_empty_prediction_scores_zero():
    s = semantic_fscore(np.zeros((0, 3)), np.ones((5, 3)))
    assert (s.precision, s.recall, s.fscore) == (0.0, 0.0, 0.0)
    s = semantic_fscore(np.ones((5, 3)), np.zeros((0, 3)))
    assert s.fscore == 0.0


def test_fscore_both_empty_rejected():
    with pytest.raises(InvalidParameterError):
        semantic_fscore(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(InvalidParameterError):
        semantic_fscore(np.ones((2, 3)), np.ones((2, 3)), tau=0.0)


def test_fscore_matches_brute_force():
    # tree-based distances must agree exactly with the quadratic scan
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred = rng.normal(size=(rng.integers(1, 40), 3))
        gt = rng.normal(size=(rng.integers(1, 40), 3))
        tau = float(rng.uniform(0.1, 2.0))
        s = semantic_fscore(pred, gt, tau=tau)
        p = float((brute_nn_dist(pred, gt) < tau).mean())
        r = float((brute_nn_dist(gt, pred) < tau).mean())
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert s.precision == p and s.recall == r
        assert s.fscore == pytest.approx(f, abs=1e-15)


def test_assign_argmax():
    scores = np.zeros((3, 2, 2))
    scores[0, 0, 0] = 0.9
    scores[1, 0, 0] = 0.8
    scores[2, 0, 1] = 0.7
    scores[0, 1, 0] = 0.6
    scores[1, 1, 0] = 0.6  # tie; lower index wins
    scores[:, 1, 1] = 0.4  # everything under the floor
    labels = assign_argmax(scores, floor=0.5)
    assert labels.tolist() == [[0, 2], [0, -1]]
    assert labels.dtype == np.int32


def test_assign_argmax_needs_stack():
    with pytest.raises(ShapeError):
        assign_argmax(np.zeros((4, 4)))


def test_mean_iou_and_acc():
    gt = np.array([[1, 1, 2, 2], [1, 1, 2, 2]])
    pred = np.array([[1, 1, 2, 2], [1, 2, 2, 2]])
    # label 1: inter 3, union 4; label 2: inter 4, union 5
    assert mean_iou(pred, gt, [1, 2]) == pytest.approx((3 / 4 + 4 / 5) / 2)
    # label 1 acc 3/4; label 2 acc 4/4
    assert mean_acc(pred, gt, [1, 2]) == pytest.approx((0.75 + 1.0) / 2)
    with pytest.raises(InvalidParameterError):
        mean_iou(pred, gt, [])


def test_report_csv_exact(tmp_path):
    rows = [
        ReportRow("two_spheres", "red ball", "iou", 0.875),
        ReportRow("two_spheres", "lamp", "fscore", 0.0, note="query matched no points"),
    ]
    path = tmp_path / "report.csv"
    write_report_csv(path, rows)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "scene,query,metric,value"
    assert lines[1] == "two_spheres,red ball,iou,0.875"
    assert lines[2] == "two_spheres,lamp,fscore,0.0"


def test_report_table_footnotes():
    rows = [
        ReportRow("s", "a", "iou", 1.0, note="both masks empty"),
        ReportRow("s", "b", "iou", 0.5),
        ReportRow("s", "c", "fscore", 0.0, note="both masks empty"),
    ]
    table = format_report_table(rows)
    assert "[1] both masks empty" in table
    assert table.count("[1]") == 3  # two marks plus the footnote line
    assert "0.500000" in table


def test_report_table_empty():
    table = format_report_table([])
    assert "scene" in table.splitlines()[0]
