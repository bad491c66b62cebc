"""Bipartite matching between predictions and ground truth (DETR-style cost)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from ..losses import FocalParams, LossWeights, box_cxcywh_to_xyxy, focal_terms, pairwise_giou_xyxy
from ..prompt_encoder import BoxSpec


@dataclass(frozen=True)
class Detection:
    box: BoxSpec
    score: float
    category: int


def solve_assignment(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


@torch.no_grad()
def match_cost(scores: torch.Tensor, pred_boxes: torch.Tensor, gt_boxes: torch.Tensor,
               w: LossWeights = LossWeights(), fp: FocalParams = FocalParams()) -> torch.Tensor:
    """Cost matrix (Q, G).

    ``scores[q, g]`` is prediction q's score for ground truth g's category.
    Classification cost is the focal positive term minus the negative term.
    """
    pos, neg = focal_terms(scores, fp)
    cls = pos - neg
    l1 = torch.cdist(pred_boxes.to(torch.float64), gt_boxes.to(torch.float64), p=1).to(scores.dtype)
    giou = pairwise_giou_xyxy(box_cxcywh_to_xyxy(pred_boxes), box_cxcywh_to_xyxy(gt_boxes))
    return w.lambda_cls * cls + w.lambda_l1 * l1 - w.lambda_giou * giou


def hungarian_match(predictions: list, gts: list, w: LossWeights = LossWeights(),
                    fp: FocalParams = FocalParams()) -> list[tuple[int, int]]:
    """Match ``Detection`` predictions to ``(BoxSpec, category)`` ground truths.

    A prediction scores 0 for any category other than its own. Returns
    (prediction index, gt index) pairs; unmatched predictions are negatives.
    """
    if not predictions or not gts:
        return []
    scores = torch.tensor(
        [[p.score if p.category == c else 0.0 for _, c in gts] for p in predictions], dtype=torch.float64
    )
    pb = torch.tensor([p.box.as_tuple() for p in predictions], dtype=torch.float64)
    gb = torch.tensor([b.as_tuple() for b, _ in gts], dtype=torch.float64)
    return solve_assignment(match_cost(scores, pb, gb, w, fp).numpy())
