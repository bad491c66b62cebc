"""Prompt banks for evaluation: generic (support-set averages) and interactive (in-image)."""

from __future__ import annotations

import numpy as np
import torch

from ..integration import PromptBank, integrate_prompt_rows
from .detector import ToyDetector, scene_tensor


def group_boxes(scenes, by_instance: bool = False, rng: np.random.Generator | None = None):
    """Box groups (one per scene and category, or one per instance).

    With ``rng`` each group keeps a random non-empty subset of its boxes, the
    way a user might mark only some of the objects.
    Returns (boxes (G, Kmax, 4), mask (G, Kmax), grid_index (G,), labels list).
    """
    groups, index, labels = [], [], []
    for s, scene in enumerate(scenes):
        for cat in scene.categories:
            boxes = [b.as_tuple() for b in scene.boxes_of(cat)]
            if rng is not None and len(boxes) > 1:
                keep = rng.choice(len(boxes), size=int(rng.integers(1, len(boxes) + 1)), replace=False)
                boxes = [boxes[i] for i in sorted(keep)]
            chunks = [[b] for b in boxes] if by_instance else [boxes]
            for chunk in chunks:
                groups.append(chunk)
                index.append(s)
                labels.append(cat)
    kmax = max(len(g) for g in groups)
    boxes = torch.zeros(len(groups), kmax, 4)
    mask = torch.zeros(len(groups), kmax, dtype=torch.bool)
    for i, g in enumerate(groups):
        boxes[i, : len(g)] = torch.tensor(g)
        mask[i, : len(g)] = True
    return boxes, mask, torch.tensor(index), labels


@torch.no_grad()
def scene_prompts(model: ToyDetector, scenes, by_instance: bool = False, chunk: int = 64):
    """Category prompts for every (scene, category) group, or every instance."""
    model.eval()
    out, labels = [], []
    for start in range(0, len(scenes), chunk):
        part = scenes[start:start + chunk]
        feats = model.features(scene_tensor(part))
        boxes, mask, idx, lbl = group_boxes(part, by_instance)
        out.append(model.encode_prompts(feats, boxes, mask, idx))
        labels.extend(lbl)
    return torch.cat(out), labels


def visual_g_prompts(model: ToyDetector, support_scenes, n_per_class: int, categories=None,
                     seed: int = 0) -> PromptBank:
    """Generic prompts: for each category, average the prompts of N sampled support scenes.

    Every GT box of the category in a support scene feeds that scene's prompt.
    Bank rows are sorted by category id.
    """
    if categories is None:
        categories = sorted({c for s in support_scenes for _, c in s.instances})
    rng = np.random.default_rng(seed)
    chosen = []
    missing = []
    for cat in categories:
        holders = [i for i, s in enumerate(support_scenes) if cat in s.categories]
        if not holders:
            missing.append(cat)
            continue
        take = rng.choice(holders, size=min(n_per_class, len(holders)), replace=False)
        chosen.extend((int(i), cat) for i in sorted(take))
    if missing:
        raise ValueError(f"categories without support scenes: {missing}")
    scenes = [support_scenes[i] for i, _ in chosen]
    prompts, labels = scene_prompts(model, scenes)
    # scene_prompts yields every category of each scene; keep the one it was sampled for
    keep, keep_labels = [], []
    cursor = 0
    for (_, cat), scene in zip(chosen, scenes):
        cats = scene.categories
        keep.append(cursor + cats.index(cat))
        keep_labels.append(cat)
        cursor += len(cats)
    bank = integrate_prompt_rows(prompts[keep].double(), keep_labels)
    return PromptBank(bank.labels, bank.prototypes.float()).sorted()


def visual_i_prompts(model: ToyDetector, scene, seed: int = 0) -> PromptBank:
    """Interactive prompts: one randomly chosen GT box per category present in ``scene``."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    rng = np.random.default_rng(seed)
    boxes = []
    cats = scene.categories
    for cat in cats:
        options = scene.boxes_of(cat)
        boxes.append([options[int(rng.integers(len(options)))].as_tuple()])
    with torch.no_grad():
        model.eval()
        feats = model.features(scene_tensor([scene]))
        b = torch.tensor(boxes, dtype=torch.float32)
        mask = torch.ones(len(cats), 1, dtype=torch.bool)
        prompts = model.encode_prompts(feats, b, mask, torch.zeros(len(cats), dtype=torch.long))
    return PromptBank(list(cats), prompts)
