"""Training step: prompt extraction, bank construction, matching and all enabled losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import NumericAbort
from ..fusion import FusionMode
from ..integration import integrate_prompt_rows
from ..losses import (
    FocalParams,
    LossWeights,
    Temperatures,
    alignment_loss,
    box_regression_loss,
    focal_classification_loss,
    relation_distillation_loss,
    supervised_contrastive_loss,
    total_loss,
)
from .detector import ToyDetector, scene_tensor
from .matching import match_cost, solve_assignment
from .protocols import group_boxes


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 400
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    align: bool = False
    global_integration: bool = False
    distill: bool = False
    scl_instead_of_distill: bool = False
    align_tau: float = 0.07
    prompt_subsets: bool = True  # prompts from a random subset of each category's boxes
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    temps: Temperatures = field(default_factory=Temperatures)

    def __post_init__(self):
        if self.distill and self.scl_instead_of_distill:
            raise ValueError("distill and scl_instead_of_distill are mutually exclusive")


def make_optimizer(model: ToyDetector, cfg: TrainConfig) -> torch.optim.Optimizer:
    backbone = set(id(p) for p in model.backbone_parameters())
    rest = [p for p in model.parameters() if id(p) not in backbone]
    return torch.optim.AdamW(
        [{"params": list(model.backbone_parameters()), "lr": cfg.backbone_lr},
         {"params": rest, "lr": cfg.lr}],
        weight_decay=cfg.weight_decay, foreach=True,
    )


def build_bank(prompts: torch.Tensor, labels: list, grid_index: torch.Tensor, n_scenes: int,
               global_integration: bool):
    """Classifier rows for every scene.

    Global integration shares the batch-wide prototypes with every scene;
    otherwise each scene only sees its own prompts. Returns
    (P (B, N, D), mask (B, N), column labels per scene).
    """
    if global_integration:
        bank = integrate_prompt_rows(prompts, labels)
        p = bank.prototypes.unsqueeze(0).expand(n_scenes, -1, -1)
        mask = torch.ones(n_scenes, len(bank), dtype=torch.bool)
        return p, mask, [list(bank.labels)] * n_scenes
    per_scene = [[] for _ in range(n_scenes)]
    for row, s in enumerate(grid_index.tolist()):
        per_scene[s].append(row)
    n = max(len(r) for r in per_scene)
    p = prompts.new_zeros(n_scenes, n, prompts.shape[1])
    mask = torch.zeros(n_scenes, n, dtype=torch.bool)
    cols = []
    for s, rows in enumerate(per_scene):
        if rows:
            p[s, : len(rows)] = prompts[rows]
            mask[s, : len(rows)] = True
        cols.append([labels[r] for r in rows])
    return p, mask, cols


def _detection_losses(logits, boxes, mask, cols, scenes, cfg: TrainConfig, num_gt: float):
    probs = torch.sigmoid(logits)
    targets = torch.zeros_like(probs)
    # one cost evaluation for every (scene, query, ground truth) triple, sliced per scene
    owner, gt_cols, gt_list = [], [], []
    for b, scene in enumerate(scenes):
        col_of = {c: i for i, c in enumerate(cols[b])}
        for box, c in scene.instances:
            owner.append(b)
            gt_cols.append(col_of[c])
            gt_list.append(box.as_tuple())
    if not gt_list:
        entry_mask = mask[:, None, :].expand_as(probs)
        zero = logits.sum() * 0.0
        return focal_classification_loss(probs, targets, cfg.focal, mask=entry_mask, num_pos=num_gt), zero, zero
    gt_boxes = torch.tensor(gt_list, dtype=boxes.dtype)
    bq = boxes.shape[1]
    full = match_cost(probs[:, :, gt_cols].reshape(-1, len(gt_list)), boxes.detach().reshape(-1, 4),
                      gt_boxes, cfg.weights, cfg.focal).numpy()
    if not np.isfinite(full).all():
        raise NumericAbort("non-finite matching cost")
    pred_idx, gt_idx = [], []
    start = 0
    for b, scene in enumerate(scenes):
        n = len(scene.instances)
        if n:
            block = full[b * bq:(b + 1) * bq, start:start + n]
            for q, g in solve_assignment(block):
                targets[b, q, gt_cols[start + g]] = 1.0
                pred_idx.append((b, q))
                gt_idx.append(start + g)
        start += n
    entry_mask = mask[:, None, :].expand_as(probs)
    cls = focal_classification_loss(probs, targets, cfg.focal, mask=entry_mask, num_pos=num_gt)
    pred = boxes[[b for b, _ in pred_idx], [q for _, q in pred_idx]]
    l1, giou = box_regression_loss(pred, gt_boxes[gt_idx])
    return cls, l1, giou


def _dense_targets(anchors: torch.Tensor, scenes, cols, shrink: float = 0.5):
    """Encoder-token assignment: a token is positive for a ground truth when its anchor
    centre lies inside the central ``shrink`` fraction of that box (smallest box wins).
    Every ground truth claims at least its nearest token.

    Returns (targets (B, L, N) filled later, list of (b, token, gt_box, col)).
    """
    pos = []
    centres = anchors[:, :2]
    for b, scene in enumerate(scenes):
        col_of = {c: i for i, c in enumerate(cols[b])}
        owner: dict = {}
        order = sorted(scene.instances, key=lambda it: -it[0].w * it[0].h)
        for box, cat in order:  # larger first so smaller boxes overwrite
            inside = ((centres[:, 0] - box.cx).abs() <= shrink * box.w / 2) & \
                     ((centres[:, 1] - box.cy).abs() <= shrink * box.h / 2)
            idx = inside.nonzero(as_tuple=True)[0].tolist()
            if not idx:
                idx = [int(((centres - torch.tensor([box.cx, box.cy])) ** 2).sum(1).argmin())]
            for t in idx:
                owner[t] = (box, col_of[cat])
        pos.extend((b, t, box, col) for t, (box, col) in owner.items())
    return pos


def _encoder_losses(logits, boxes, mask, cols, scenes, anchors, cfg: TrainConfig):
    probs = torch.sigmoid(logits)
    targets = torch.zeros_like(probs)
    pos = _dense_targets(anchors, scenes, cols)
    for b, t, _, col in pos:
        targets[b, t, col] = 1.0
    entry_mask = mask[:, None, :].expand_as(probs)
    cls = focal_classification_loss(probs, targets, cfg.focal, mask=entry_mask, num_pos=float(len(pos)))
    pred = boxes[[b for b, *_ in pos], [t for _, t, *_ in pos]]
    gt = torch.tensor([box.as_tuple() for _, _, box, _ in pos], dtype=boxes.dtype)
    l1, giou = box_regression_loss(pred, gt)
    return cls, l1, giou


def compute_losses(model: ToyDetector, scenes, text_embeds: torch.Tensor, cfg: TrainConfig,
                   seed: int = 0) -> dict:
    """Unweighted loss parts for one batch (summed over encoder proposals and decoder layers)."""
    feats = model.features(scene_tensor(scenes))
    rng = np.random.default_rng(seed) if cfg.prompt_subsets else None
    boxes, mask, grid_index, labels = group_boxes(scenes, rng=rng)
    prompts = model.encode_prompts(feats, boxes, mask, grid_index)
    p, pmask, cols = build_bank(prompts, labels, grid_index, len(scenes), cfg.global_integration)
    out = model.detect(feats, p, pmask)

    num_gt = float(sum(len(s.instances) for s in scenes))
    parts = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    stages = [_encoder_losses(out["enc"]["logits"], out["enc"]["boxes"], pmask, cols, scenes, model.anchors, cfg)]
    stages += [_detection_losses(st["logits"], st["boxes"], pmask, cols, scenes, cfg, num_gt) for st in out["dec"]]
    for cls, l1, giou in stages:
        parts["cls"] = parts["cls"] + cls
        parts["l1"] = parts["l1"] + l1
        parts["giou"] = parts["giou"] + giou

    selective = [f for f in out["fusion_layers"] if f.last_scores is not None]
    if selective:
        present = torch.tensor([[c in set(s.categories) for c in cols[b]] for b, s in enumerate(scenes)]
                               if cfg.global_integration else
                               [[True] * len(cols[b]) + [False] * (pmask.shape[1] - len(cols[b]))
                                for b in range(len(scenes))])
        parts["presence"] = sum(f.presence_loss(present, cfg.focal, pmask) for f in selective)

    label_t = torch.tensor(labels)
    if cfg.align:
        active = sorted(set(labels))
        row_of = {c: i for i, c in enumerate(active)}
        parts["align"] = alignment_loss(prompts, text_embeds[active],
                                        [row_of[c] for c in labels], cfg.align_tau)
    if cfg.distill and len(labels) >= 2:
        parts["distill"] = relation_distillation_loss(prompts, text_embeds[label_t], cfg.temps)
    if cfg.scl_instead_of_distill and len(set(labels)) < len(labels):
        parts["scl"] = supervised_contrastive_loss(prompts, label_t, cfg.temps.tau_v)
    return parts


def train_step(model: ToyDetector, optimizer, scenes, text_embeds, cfg: TrainConfig, step: int | None = None) -> dict:
    """One optimizer update; returns the float value of every loss part and the total."""
    model.train()
    try:
        parts = compute_losses(model, scenes, text_embeds, cfg, seed=0 if step is None else step)
        loss = total_loss(parts, cfg.weights)
    except NumericAbort as exc:
        raise NumericAbort(str(exc), step) from None
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    record = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
    record["total"] = float(loss.detach())
    if not math.isfinite(record["total"]):
        raise NumericAbort("total loss is not finite", step)
    return record


def batches(scenes, batch_size: int, steps: int, seed: int):
    """Endless seeded shuffles of the training scenes, cut into batches."""
    rng = np.random.default_rng(seed)
    order: list = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(scenes)).tolist())
        chosen, order = order[:batch_size], order[batch_size:]
        yield [scenes[i] for i in chosen]
