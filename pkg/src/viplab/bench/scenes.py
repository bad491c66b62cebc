"""Synthetic scenes with planted, hierarchy-structured categories.

A category space holds unit text embeddings with a group structure (same
group = more similar) and visual prototypes that are a fixed rotation of the
text embeddings plus category-specific offsets, so the two modalities are
related without being identical. A scene is a feature grid whose box regions
carry their category's prototype under instance and scene-level nuisance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..prompt_encoder import BoxSpec

MAX_PAIR_IOU = 0.3
PLACEMENT_TRIES = 100


@dataclass
class CategorySpace:
    K: int
    D: int
    groups: int
    seed: int
    text_embeds: np.ndarray  # (K, D), unit rows
    visual_prototypes: np.ndarray  # (K, D)
    hierarchy: list  # category -> group id
    nuisance_basis: np.ndarray | None = None  # (R, D) orthonormal, orthogonal to the prototypes
    appearance_modes: np.ndarray | None = None  # (K, M, D) per-category sub-type signals

    def text_similarity(self) -> np.ndarray:
        return self.text_embeds @ self.text_embeds.T

    def group_separation(self) -> tuple[float, float]:
        """(min within-group, max cross-group) text cosine similarity."""
        sim = self.text_similarity()
        g = np.asarray(self.hierarchy)
        same = (g[:, None] == g[None, :]) & ~np.eye(self.K, dtype=bool)
        cross = g[:, None] != g[None, :]
        lo = sim[same].min() if same.any() else np.inf
        hi = sim[cross].max() if cross.any() else -np.inf
        return float(lo), float(hi)


@dataclass(frozen=True)
class SpaceParams:
    common: float = 0.7  # shared direction, keeps all texts mutually similar
    group: float = 1.0
    own: float = 1.0
    visual_scale: float = 2.0
    visual_offset: float = 0.35
    modes: int = 3  # appearance sub-types per category; one is drawn per (scene, category)
    mode_spread: float = 1.0


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_category_space(K: int, D: int, groups: int, seed: int,
                            params: SpaceParams = SpaceParams(), max_tries: int = 1000) -> CategorySpace:
    if K < 2 or D < 8 or groups < 1:
        raise ValueError("need K >= 2, D >= 8, groups >= 1")
    if K < groups:
        raise ValueError(f"K={K} is smaller than groups={groups}")
    rng = np.random.default_rng(seed)
    hierarchy = [c * groups // K for c in range(K)]
    for _ in range(max_tries):
        common = _unit(rng.standard_normal(D))
        anchors = _unit(rng.standard_normal((groups, D)))
        own = _unit(rng.standard_normal((K, D)))
        text = _unit(params.common * common + params.group * anchors[hierarchy] + params.own * own)
        space = CategorySpace(K, D, groups, seed, text, np.empty((K, D)), hierarchy)
        lo, hi = space.group_separation()
        if groups == K or lo > hi:
            break
    else:
        raise RuntimeError("could not satisfy the group separation constraint")
    rotation, _ = np.linalg.qr(rng.standard_normal((D, D)))
    offsets = _unit(rng.standard_normal((K, D))) * params.visual_offset
    space.visual_prototypes = params.visual_scale * _unit(text @ rotation.T + offsets)
    space.nuisance_basis = _complement_basis(space.visual_prototypes)
    if params.modes > 0:
        spread = _unit(rng.standard_normal((K, params.modes, D))) * params.mode_spread
        spread -= spread.mean(axis=1, keepdims=True)  # prototypes stay the mode means
        space.appearance_modes = space.visual_prototypes[:, None, :] + spread
    return space


def _complement_basis(rows: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of span(rows); falls back to all of R^D."""
    d = rows.shape[1]
    _, s, vt = np.linalg.svd(rows, full_matrices=True)
    rank = int((s > 1e-10 * s.max()).sum())
    return vt[rank:] if rank < d else np.eye(d)


@dataclass(frozen=True)
class SceneParams:
    grid: int = 16
    max_instances: int = 5
    max_categories: int = 3
    sigma_inst: float = 0.1
    sigma_scene: float = 0.6  # per nuisance direction
    sigma_bg: float = 0.35
    min_size: float = 0.15
    max_size: float = 0.4


@dataclass
class SyntheticScene:
    grid: np.ndarray  # (H, W, D)
    instances: list  # [(BoxSpec, category)]
    nuisance_seed: int
    scene_id: int = 0

    @property
    def categories(self) -> list:
        return sorted({c for _, c in self.instances})

    def boxes_of(self, category) -> list:
        return [b for b, c in self.instances if c == category]


def box_iou(a: BoxSpec, b: BoxSpec) -> float:
    ax0, ay0, ax1, ay1 = a.cx - a.w / 2, a.cy - a.h / 2, a.cx + a.w / 2, a.cy + a.h / 2
    bx0, by0, bx1, by1 = b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def cell_mask(box: BoxSpec, size: int) -> np.ndarray:
    """Cells whose centres fall inside ``box``; at least the centre cell."""
    centres = (np.arange(size) + 0.5) / size
    inx = (centres >= box.cx - box.w / 2) & (centres <= box.cx + box.w / 2)
    iny = (centres >= box.cy - box.h / 2) & (centres <= box.cy + box.h / 2)
    mask = iny[:, None] & inx[None, :]
    if not mask.any():
        mask[min(int(box.cy * size), size - 1), min(int(box.cx * size), size - 1)] = True
    return mask


def generate_scene(space: CategorySpace, max_instances: int = 5, params: SceneParams = SceneParams(),
                   seed: int = 0, scene_id: int = 0) -> SyntheticScene:
    """Deterministic in (space.seed, seed)."""
    if max_instances < 1:
        raise ValueError("max_instances must be >= 1")
    rng = np.random.default_rng([space.seed, seed])
    size, d = params.grid, space.D
    n_cat = int(rng.integers(1, min(params.max_categories, space.K, max_instances) + 1))
    cats = rng.choice(space.K, size=n_cat, replace=False)
    n_inst = int(rng.integers(n_cat, max_instances + 1))
    labels = list(cats) + list(rng.choice(cats, size=n_inst - n_cat))

    grid = rng.standard_normal((size, size, d)) * params.sigma_bg
    basis = space.nuisance_basis if space.nuisance_basis is not None else np.eye(d)
    nuisance = rng.standard_normal(basis.shape[0]) @ basis * params.sigma_scene
    n_modes = 0 if space.appearance_modes is None else space.appearance_modes.shape[1]
    mode_of = {int(c): int(rng.integers(n_modes)) if n_modes else 0 for c in cats}
    instances = []
    for cat in labels:
        for _ in range(PLACEMENT_TRIES):
            w, h = rng.uniform(params.min_size, params.max_size, size=2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            box = BoxSpec(cx, cy, w, h)
            if all(box_iou(box, other) <= MAX_PAIR_IOU for other, _ in instances):
                break
        else:
            continue
        if n_modes:
            base = space.appearance_modes[cat, mode_of[int(cat)]]
        else:
            base = space.visual_prototypes[cat]
        signal = base + rng.standard_normal(d) * params.sigma_inst + nuisance
        mask = cell_mask(box, size)
        jitter = rng.standard_normal((int(mask.sum()), d)) * (0.5 * params.sigma_inst)
        grid[mask] = signal + jitter
        instances.append((box, int(cat)))
    return SyntheticScene(grid, instances, int(seed), scene_id)


@dataclass
class CorpusSpec:
    """Everything needed to regenerate a split: regeneration beats storing grids."""

    K: int = 12
    D: int = 32
    groups: int = 4
    space_seed: int = 0
    scene_seeds: list = field(default_factory=list)
    scene: SceneParams = SceneParams()
    space: SpaceParams = SpaceParams()

    def build_space(self) -> CategorySpace:
        return generate_category_space(self.K, self.D, self.groups, self.space_seed, self.space)

    def build_scenes(self, space: CategorySpace | None = None) -> list:
        space = space or self.build_space()
        return [generate_scene(space, self.scene.max_instances, self.scene, s, scene_id=i)
                for i, s in enumerate(self.scene_seeds)]

    def to_json(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CorpusSpec":
        data = dict(data)
        data["scene"] = SceneParams(**data.get("scene", {}))
        data["space"] = SpaceParams(**data.get("space", {}))
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


RECORD_FIELDS = ["scene_id", "category", "cx", "cy", "w", "h", "score"]


def write_records(path, rows) -> None:
    """Line-delimited ``scene_id, category, cx, cy, w, h[, score]`` records.

    ``rows`` yields (scene_id, category, BoxSpec) or (scene_id, category, BoxSpec, score).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            sid, cat, box = row[:3]
            out = [sid, cat, *(repr(float(v)) for v in box.as_tuple())]
            if len(row) > 3:
                out.append(repr(float(row[3])))
            w.writerow(out)


def read_records(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            if len(rec) not in (6, 7):
                raise ValueError(f"line {lineno}: expected 6 or 7 fields, got {len(rec)}")
            sid, cat = int(rec[0]), int(rec[1])
            box = BoxSpec(*(float(v) for v in rec[2:6]))
            rows.append((sid, cat, box) if len(rec) == 6 else (sid, cat, box, float(rec[6])))
    return rows
