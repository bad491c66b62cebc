"""Visual prompt encoder: user boxes -> prompt embeddings read from a feature grid.

Each box becomes a query (shared content embedding + projected sine-cosine box
code). A class token paired with the whole-image box is appended. Queries
then sample the grid at learned offsets around their box, bilinearly, and the
class token pools the per-box readouts into the category prompt.

Feature grids are channels-first, ``(B, D, H, W)``. Box coordinates are
normalized ``(cx, cy, w, h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

GLOBAL_BOX = (0.5, 0.5, 1.0, 1.0)
# near-rectifying softplus: a soft floor adds a shared positive offset to every prompt
READOUT_SHARPNESS = 10.0


@dataclass(frozen=True)
class BoxSpec:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        w = min(max(float(self.w), 1e-6), 1.0)
        h = min(max(float(self.h), 1e-6), 1.0)
        cx = min(max(float(self.cx), w / 2), 1.0 - w / 2)
        cy = min(max(float(self.cy), h / 2), 1.0 - h / 2)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "cy", cy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "BoxSpec":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def boxes_tensor(boxes: Sequence, dtype=torch.float32) -> torch.Tensor:
    if isinstance(boxes, torch.Tensor):
        return boxes.to(dtype)
    rows = [b.as_tuple() if isinstance(b, BoxSpec) else tuple(b) for b in boxes]
    return torch.tensor(rows, dtype=dtype).reshape(-1, 4)


def sine_cosine_box_encoding(boxes, dim: int, projection: nn.Module | None = None,
                             temperature: float = 10000.0) -> torch.Tensor:
    """Sine-cosine code of each box, optionally followed by a linear projection.

    Each of (cx, cy, w, h) gets ``dim // 4`` channels: interleaved
    sin/cos of ``2*pi*c / temperature**(2i / (dim//4))``.
    """
    if dim % 8 != 0:
        raise ValueError(f"encoding dim must be divisible by 8, got {dim}")
    b = boxes_tensor(boxes) if not isinstance(boxes, torch.Tensor) else boxes
    per_coord = dim // 4
    i = torch.arange(per_coord // 2, dtype=b.dtype)
    freq = temperature ** (2 * i / per_coord)
    angles = 2 * math.pi * b[..., :, None] / freq  # (..., 4, per_coord/2)
    code = torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(-3)
    return code if projection is None else projection(code)


@dataclass
class PromptQuerySet:
    queries: torch.Tensor  # (K+1, D), class-token query last
    boxes: torch.Tensor  # (K+1, 4), global box last

    def __post_init__(self):
        if self.queries.shape[0] != self.boxes.shape[0]:
            raise ValueError("one box per query required")
        if tuple(self.boxes[-1].tolist()) != GLOBAL_BOX:
            raise ValueError("last query must carry the global box")

    @property
    def num_boxes(self) -> int:
        return self.queries.shape[0] - 1


def build_prompt_queries(boxes, content_embedding: torch.Tensor, class_token: torch.Tensor,
                         box_projection: nn.Module | None = None,
                         query_projection: nn.Module | None = None) -> PromptQuerySet:
    """Assemble the K box queries plus the class-token query.

    Box rows are ``[content ; Linear(PE(box))]``, the extra row is
    ``[class_token ; Linear(PE(global box))]``, then ``query_projection`` maps
    the concatenation to model width. ``None`` projections are identities.
    """
    b = boxes_tensor(boxes, dtype=content_embedding.dtype)
    if b.shape[0] == 0:
        raise ValueError("at least one box is required")
    k = b.shape[0]
    all_boxes = torch.cat([b, torch.tensor([GLOBAL_BOX], dtype=b.dtype)])
    pe_dim = content_embedding.shape[-1]
    pe_dim = pe_dim + (-pe_dim) % 8
    box_code = sine_cosine_box_encoding(all_boxes, pe_dim, box_projection)
    content = torch.cat([content_embedding.expand(k, -1), class_token[None, :]])
    q = torch.cat([content, box_code], dim=-1)
    if query_projection is not None:
        q = query_projection(q)
    return PromptQuerySet(q, all_boxes)


def bilinear_sample(values: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Read ``values`` (N, C, H, W) at normalized ``locations`` (N, Q, P, 2) given as (x, y).

    Locations are clamped to the unit square; cell centers sit at
    ``(j + 0.5) / W``. Returns (N, C, Q, P).
    """
    grid = locations.clamp(0.0, 1.0) * 2.0 - 1.0
    return F.grid_sample(values, grid, mode="bilinear", padding_mode="border", align_corners=False)


class DeformableSampler(nn.Module):
    """Single-scale deformable attention readout around reference boxes."""

    def __init__(self, dim: int, n_heads: int = 2, n_points: int = 4):
        super().__init__()
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.dim, self.n_heads, self.n_points = dim, n_heads, n_points
        self.offsets = nn.Linear(dim, n_heads * n_points * 2)
        self.weights = nn.Linear(dim, n_heads * n_points)
        self.value = nn.Linear(dim, dim)
        self.output = nn.Linear(dim, dim)
        self._reset()
        self.last_weights: torch.Tensor | None = None

    def _reset(self):
        nn.init.zeros_(self.offsets.weight)
        # initial points spread on a ring inside the box
        angles = torch.arange(self.n_heads * self.n_points) * (2 * math.pi / (self.n_heads * self.n_points))
        ring = torch.stack([angles.cos(), angles.sin()], -1) * 0.5
        with torch.no_grad():
            self.offsets.bias.copy_(ring.flatten())
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def value_map(self, grid: torch.Tensor) -> torch.Tensor:
        """Project a (B, D, H, W) grid to per-head values (B, heads, D/heads, H, W)."""
        b, d, h, w = grid.shape
        v = self.value(grid.flatten(2).transpose(1, 2))  # (B, HW, D)
        return v.transpose(1, 2).reshape(b, self.n_heads, d // self.n_heads, h, w)

    def forward(self, queries: torch.Tensor, ref_boxes: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        """queries (N, Q, D), ref_boxes (N, Q, 4), values (N, heads, dh, H, W) -> (N, Q, D)."""
        n, nq, _ = queries.shape
        heads, pts = self.n_heads, self.n_points
        off = self.offsets(queries).view(n, nq, heads, pts, 2)
        wts = torch.softmax(self.weights(queries).view(n, nq, heads, pts), dim=-1)
        self.last_weights = wts
        centre = ref_boxes[..., None, None, :2]
        half = ref_boxes[..., None, None, 2:] * 0.5
        loc = centre + off * half  # (N, Q, heads, P, 2)
        loc = loc.permute(0, 2, 1, 3, 4).reshape(n * heads, nq, pts, 2)
        dh, hh, ww = values.shape[2:]
        sampled = bilinear_sample(values.reshape(n * heads, dh, hh, ww), loc)  # (N*heads, dh, Q, P)
        sampled = sampled.view(n, heads, dh, nq, pts)
        mixed = (sampled * wts.permute(0, 2, 1, 3)[:, :, None]).sum(-1)  # (N, heads, dh, Q)
        mixed = mixed.permute(0, 3, 1, 2).reshape(n, nq, heads * dh)
        return self.output(mixed)


class PromptEncoder(nn.Module):
    """Boxes -> visual prompts via stacked query self-attention and deformable reads.

    The prompt of every box query is its last-layer readout; the class-token
    prompt is an attention-weighted pool of all last-layer readouts (weights
    sum to one), so it aggregates several boxes of one category.
    """

    def __init__(self, dim: int, n_layers: int = 3, n_heads: int = 2, n_points: int = 4):
        super().__init__()
        self.dim = dim
        self.content = nn.Parameter(torch.randn(dim) * 0.1)
        self.class_token = nn.Parameter(torch.randn(dim) * 0.1)
        pe_dim = dim + (-dim) % 8
        self.box_projection = nn.Linear(pe_dim, dim)
        self.query_projection = nn.Linear(2 * dim, dim)
        self.self_attn = nn.ModuleList(
            nn.MultiheadAttention(dim, n_heads, batch_first=True) for _ in range(n_layers)
        )
        self.samplers = nn.ModuleList(DeformableSampler(dim, n_heads, n_points) for _ in range(n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(2 * n_layers))
        self.ffn = nn.ModuleList(
            nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)) for _ in range(n_layers)
        )
        self.pool_q = nn.Linear(dim, dim)
        self.pool_k = nn.Linear(dim, dim)

    @property
    def n_layers(self) -> int:
        return len(self.samplers)

    def queries(self, boxes) -> PromptQuerySet:
        return build_prompt_queries(boxes, self.content, self.class_token,
                                    self.box_projection, self.query_projection)

    def encode_groups(self, grids: torch.Tensor, boxes: torch.Tensor, mask: torch.Tensor,
                      grid_index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched prompts for G box groups.

        grids: (B, D, H, W) features; boxes: (G, Kmax, 4) padded; mask: (G, Kmax)
        true for real boxes; grid_index: (G,) grid of each group.
        Returns (box_prompts (G, Kmax, D), class_prompts (G, D)).
        """
        g, kmax, _ = boxes.shape
        pe_dim = self.box_projection.in_features
        glob = torch.tensor(GLOBAL_BOX, dtype=boxes.dtype).expand(g, 1, 4)
        all_boxes = torch.cat([boxes, glob], dim=1)  # (G, Kmax+1, 4), class row last
        code = sine_cosine_box_encoding(all_boxes, pe_dim, self.box_projection)
        content = torch.cat([self.content.expand(g, kmax, -1), self.class_token.expand(g, 1, -1)], dim=1)
        q = self.query_projection(torch.cat([content, code], dim=-1))
        full_mask = torch.cat([mask, torch.ones(g, 1, dtype=torch.bool)], dim=1)
        # padded boxes must not drive sampling; park them on the global box
        all_boxes = torch.where(full_mask[..., None], all_boxes, glob.expand(-1, kmax + 1, -1))

        readout = None
        for layer in range(self.n_layers):
            sampler = self.samplers[layer]
            values = sampler.value_map(grids)[grid_index]
            attn, _ = self.self_attn[layer](q, q, q, key_padding_mask=~full_mask, need_weights=False)
            q = self.norms[2 * layer](q + attn)
            readout = sampler(q, all_boxes, values)
            q = self.norms[2 * layer + 1](q + readout)
            q = q + self.ffn[layer](q)

        logits = (self.pool_q(q[:, -1:]) @ self.pool_k(q).transpose(1, 2)).squeeze(1) / math.sqrt(self.dim)
        beta = torch.softmax(logits.masked_fill(~full_mask, -math.inf), dim=-1)
        readout = F.softplus(readout, beta=READOUT_SHARPNESS)
        class_prompt = (beta[..., None] * readout).sum(1)
        return readout[:, :kmax], class_prompt

    def forward(self, boxes, grid: torch.Tensor) -> torch.Tensor:
        """Prompts for one box group on one grid (D, H, W): (K+1, D), class prompt last."""
        b = boxes_tensor(boxes, dtype=grid.dtype)
        if b.shape[0] == 0:
            raise ValueError("at least one box is required")
        box_prompts, class_prompt = self.encode_groups(
            grid[None], b[None], torch.ones(1, b.shape[0], dtype=torch.bool), torch.zeros(1, dtype=torch.long)
        )
        return torch.cat([box_prompts[0], class_prompt], dim=0)


def extract_visual_prompts(encoder: PromptEncoder, boxes, grid: torch.Tensor) -> torch.Tensor:
    """K+1 prompt embeddings for ``boxes`` on a single (D, H, W) grid; row K+1 is the category prompt."""
    if grid.shape[0] != encoder.dim:
        raise ValueError(f"grid dim {grid.shape[0]} != encoder dim {encoder.dim}")
    return encoder(boxes, grid)
