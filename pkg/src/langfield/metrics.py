"""Segmentation and localization metrics plus report formatting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError, ShapeError

FSCORE_TAU = 0.05
ASSIGN_FLOOR = 0.5


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks agree (1)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True)
class FScore:
    precision: float
    recall: float
    fscore: float


def semantic_fscore(pred: np.ndarray, gt: np.ndarray, tau: float = FSCORE_TAU) -> FScore:
    """Point-cloud precision/recall at distance strictly below tau.

    An empty prediction against a real object scores zero across the
    board. Scoring two empty clouds is a caller error.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if tau <= 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    if len(gt) == 0 and len(pred) == 0:
        raise InvalidParameterError("both point sets are empty")
    if len(pred) == 0 or len(gt) == 0:
        return FScore(0.0, 0.0, 0.0)
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    precision = float((d_pred < tau).mean())
    recall = float((d_gt < tau).mean())
    if precision + recall == 0:
        return FScore(precision, recall, 0.0)
    return FScore(precision, recall, 2 * precision * recall / (precision + recall))


def assign_argmax(score_stack: np.ndarray, floor: float = ASSIGN_FLOOR) -> np.ndarray:
    """Per-pixel winning query index, or -1 where every query scores below floor.

    Ties go to the lowest query index.
    """
    score_stack = np.asarray(score_stack, dtype=np.float64)
    if score_stack.ndim != 3:
        raise ShapeError(f"expected (Q, H, W) scores, got {score_stack.shape}")
    winner = np.argmax(score_stack, axis=0).astype(np.int32)
    best = np.max(score_stack, axis=0)
    winner[best < floor] = -1
    return winner


def _per_label(pred: np.ndarray, gt: np.ndarray, labels) -> tuple[list, list]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    if len(labels) == 0:
        raise InvalidParameterError("need at least one label")
    ious, accs = [], []
    for lab in labels:
        p = pred == lab
        g = gt == lab
        ious.append(iou(p, g))
        total = g.sum()
        accs.append(float((p & g).sum() / total) if total else 1.0)
    return ious, accs


def mean_iou(pred: np.ndarray, gt: np.ndarray, labels) -> float:
    ious, _ = _per_label(pred, gt, labels)
    return float(np.mean(ious))


def mean_acc(pred: np.ndarray, gt: np.ndarray, labels) -> float:
    _, accs = _per_label(pred, gt, labels)
    return float(np.mean(accs))


@dataclass(frozen=True)
class ReportRow:
    scene: str
    query: str
    metric: str
    value: float
    note: str = ""


def write_report_csv(path: str | Path, rows) -> None:
    lines = ["scene,query,metric,value"]
    for row in rows:
        lines.append(f"{row.scene},{row.query},{row.metric},{row.value!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_report_table(rows) -> str:
    """Aligned text table; rows with notes get numbered footnote markers."""
    notes = []
    for row in rows:
        if row.note and row.note not in notes:
            notes.append(row.note)
    header = ("scene", "query", "metric", "value")
    cells = []
    for row in rows:
        mark = f" [{notes.index(row.note) + 1}]" if row.note else ""
        cells.append((row.scene, row.query, row.metric, f"{row.value:.6f}{mark}"))
    widths = [max(len(header[i]), *(len(c[i]) for c in cells)) if cells else len(header[i]) for i in range(4)]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(4)),
        "  ".join("-" * widths[i] for i in range(4)),
    ]
    for c in cells:
        lines.append("  ".join(c[i].ljust(widths[i]) for i in range(4)))
    for i, note in enumerate(notes, 1):
        lines.append(f"[{i}] {note}")
    return "\n".join(lines)
