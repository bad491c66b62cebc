"""Average precision at a single IoU threshold, 101-point interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import box_iou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class APResult:
    per_category: dict
    mAP: float


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """AP from a score-sorted true-positive indicator vector."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate_ap(detections: list, gts: list, iou_threshold: float = 0.5, categories=None) -> APResult:
    """Per-category AP and mAP.

    ``detections[s]`` lists ``Detection`` objects for scene s and ``gts[s]`` its
    ``(BoxSpec, category)`` pairs. Detections are greedily matched in score
    order to the best unmatched ground truth with IoU >= threshold.
    Categories without ground truth are left out of the mean.
    """
    if len(detections) != len(gts):
        raise ValueError("need one detection list per scene")
    present = sorted({c for scene in gts for _, c in scene})
    cats = present if categories is None else [c for c in categories if c in set(present)]
    per_cat = {}
    for cat in cats:
        scored = []
        n_gt = 0
        for s, (dets, scene_gts) in enumerate(zip(detections, gts)):
            n_gt += sum(1 for _, c in scene_gts if c == cat)
            scored.extend((d.score, s, d.box) for d in dets if d.category == cat)
        order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
        used: set = set()
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            _, s, box = scored[i]
            best, best_iou = None, iou_threshold
            for g, (gbox, c) in enumerate(gts[s]):
                if c != cat or (s, g) in used:
                    continue
                iou = box_iou(box, gbox)
                if iou >= best_iou:
                    best, best_iou = g, iou
            if best is not None:
                used.add((s, best))
                tp[rank] = 1.0
        per_cat[cat] = interpolated_ap(tp, n_gt)
    mAP = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    return APResult(per_cat, mAP)
