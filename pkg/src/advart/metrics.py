"""IoU and single-class average precision (all-point interpolation)."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .patchops import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def match_detections(
    detections: Sequence[Sequence[tuple[BoundingBox, float]]],
    truths: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching by descending score across all images.

    Each detection is matched to the unmatched truth in its image with the
    highest IoU, if that IoU reaches the threshold.  Returns (scores, tp flags,
    number of truths), sorted by score descending; ties keep input order.
    """
    flat = [(score, img, box) for img, dets in enumerate(detections) for box, score in dets]
    order = sorted(range(len(flat)), key=lambda k: -flat[k][0])
    used = [np.zeros(len(t), dtype=bool) for t in truths]
    scores = np.empty(len(flat))
    tp = np.zeros(len(flat), dtype=bool)
    for rank, k in enumerate(order):
        score, img, box = flat[k]
        scores[rank] = score
        best, best_j = -1.0, -1
        for j, gt in enumerate(truths[img]):
            if used[img][j]:
                continue
            o = iou(box, gt)
            if o >= iou_threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[rank] = True
    return scores, tp, sum(len(t) for t in truths)


def pr_curve(tp: np.ndarray, n_truth: int) -> tuple[np.ndarray, np.ndarray]:
    if n_truth == 0:
        raise ValueError("precision/recall undefined without ground-truth boxes")
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, len(tp) + 1)
    return recall, precision


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_from_detections(detections, truths, iou_threshold: float = 0.5) -> tuple[float, np.ndarray, np.ndarray]:
    """AP in [0, 1] plus the PR points."""
    _, tp, n = match_detections(detections, truths, iou_threshold)
    recall, precision = pr_curve(tp, n)
    if len(tp) == 0:
        return 0.0, recall, precision
    # Same area as average_precision, but each recall step is exactly 1/n:
    # summing the envelope at true-positive ranks keeps a perfect match at 1.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(env[tp]) / n, recall, precision
