"""Box IoU and average-precision evaluation over IoU thresholds .50:.05:.95.

Average precision uses 101-point recall interpolation and greedy
score-ordered matching: detections are visited in decreasing score (ties
broken by lower sample id, then lower box index) and each one claims the
still-unmatched ground-truth box of its sample and category with the
highest IoU at or above the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = tuple((50 + 5 * k) / 100 for k in range(10))


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # cx, cy, w, h in pixels
    category: int
    score: float


def iou(a, b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class MapResult:
    map: float
    ap50: float
    ap75: float
    per_category: dict  # category -> (map, ap50, ap75)


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered hit flags."""
    if n_gt == 0:
        return float("nan")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision among points with recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def evaluate_map(detections: dict, ground_truth: dict) -> MapResult:
    """AP over IoU thresholds for detections/ground truth keyed by sample id.

    ``detections[sid]`` is a list of Detection; ``ground_truth[sid]`` is a
    ``(boxes, categories)`` pair.  Categories with no ground-truth boxes are
    excluded from the means; if there is no ground truth at all this is an
    error, not a zero score.
    """
    categories = sorted(
        {int(c) for _, cats in ground_truth.values() for c in np.atleast_1d(cats)}
    )
    if not categories:
        raise ValueError("ground truth contains no boxes; AP is undefined")

    per_category = {}
    for cat in categories:
        gt_boxes = {
            sid: np.asarray(boxes, float)[np.atleast_1d(cats) == cat]
            for sid, (boxes, cats) in ground_truth.items()
        }
        n_gt = sum(len(b) for b in gt_boxes.values())
        dets = [
            (-d.score, sid, i, d)
            for sid, ds in detections.items()
            for i, d in enumerate(ds)
            if d.category == cat
        ]
        dets.sort(key=lambda r: r[:3])
        aps = []
        for thresh in IOU_THRESHOLDS:
            taken = {sid: np.zeros(len(b), bool) for sid, b in gt_boxes.items()}
            flags = np.zeros(len(dets), dtype=bool)
            for k, (_, sid, _, det) in enumerate(dets):
                boxes = gt_boxes.get(sid)
                if boxes is None or not len(boxes):
                    continue
                ious = np.array([iou(det.box, g) for g in boxes])
                ious[taken[sid]] = -1.0
                best = int(np.argmax(ious))
                if ious[best] >= thresh:
                    taken[sid][best] = True
                    flags[k] = True
            aps.append(_average_precision(flags, n_gt))
        per_category[cat] = (float(np.mean(aps)), aps[0], aps[5])

    overall = tuple(
        float(np.mean([per_category[c][k] for c in categories])) for k in range(3)
    )
    return MapResult(overall[0], overall[1], overall[2], per_category)
