"""Prompt-image fusion with presence gating.

Three modes share one layer: ``none`` (identity), ``full`` (ungated
bidirectional cross-attention, the Grounding-DINO style baseline) and
``selective`` (prompts judged absent from the image are masked out as keys
and frozen as queries).
"""

from __future__ import annotations

import math
from enum import Enum

import torch
from torch import nn

from .embedding import prompt_score
from .losses import FocalParams, focal_classification_loss

GATE_SENTINEL = -1e9
DEFAULT_THRESHOLD = 0.1


class FusionMode(str, Enum):
    NONE = "none"
    FULL = "full"
    SELECTIVE = "selective"


def auxiliary_scores(x: torch.Tensor, p: torch.Tensor, b=0.0) -> torch.Tensor:
    """Presence scores sigmoid(X P^T + b) between image tokens and prompts."""
    return prompt_score(x, p, b)


def gate_from_scores(s: torch.Tensor, theta: float = DEFAULT_THRESHOLD) -> torch.Tensor:
    """Per-prompt gate: 0 where the best token score strictly exceeds theta, else the sentinel.

    ``s`` is ``(..., L_tokens, N_prompts)``; the max runs over the token axis.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {theta}")
    if s.shape[-2] == 0:
        raise ValueError("empty score matrix")
    peak = s.detach().amax(dim=-2)
    return torch.where(peak > theta, torch.zeros_like(peak), torch.full_like(peak, GATE_SENTINEL))


def attention_weights(q: torch.Tensor, k: torch.Tensor, gate: torch.Tensor | None = None) -> torch.Tensor:
    """softmax((Q K^T + G) / sqrt(d)) with the gate broadcast over queries."""
    logits = q @ k.transpose(-1, -2)
    if gate is not None:
        logits = logits + gate.unsqueeze(-2)
    return torch.softmax(logits / math.sqrt(q.shape[-1]), dim=-1)


def gated_cross_attention(
    queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, g: torch.Tensor | None = None
) -> torch.Tensor:
    """Scaled dot-product attention with an additive key gate.

    When every key of a sample is gated the queries come back untouched.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("key and value counts differ")
    if g is not None and g.shape[-1] != keys.shape[-2]:
        raise ValueError("gate length must equal key count")
    out = attention_weights(queries, keys, g) @ values
    if g is None:
        return out
    closed = (g <= GATE_SENTINEL).all(dim=-1)
    return torch.where(closed[..., None, None], queries, out)


class FusionLayer(nn.Module):
    """One bidirectional fusion step between image tokens ``x`` and prompts ``p``.

    x: (B, L, D); p: (B, N, D) or a shared (N, D) bank. ``prompt_mask``
    (B, N) marks real prompt rows when per-image banks are padded.
    """

    def __init__(self, dim: int, mode=FusionMode.SELECTIVE, threshold: float = DEFAULT_THRESHOLD,
                 zero_init: bool = False):
        super().__init__()
        self.mode = FusionMode(mode)
        self.threshold = threshold
        self.dim = dim
        # prompt -> image
        self.q_x = nn.Linear(dim, dim)
        self.k_p = nn.Linear(dim, dim)
        self.v_p = nn.Linear(dim, dim)
        self.out_x = nn.Linear(dim, dim)
        # image -> prompt
        self.q_p = nn.Linear(dim, dim)
        self.k_x = nn.Linear(dim, dim)
        self.v_x = nn.Linear(dim, dim)
        self.out_p = nn.Linear(dim, dim)
        self.aux_bias = nn.Parameter(torch.tensor(-2.0))
        if zero_init:
            for lin in (self.out_x, self.out_p):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        self.last_scores: torch.Tensor | None = None

    def presence_scores(self, x, p):
        return auxiliary_scores(x, p, self.aux_bias)

    def forward(self, x: torch.Tensor, p: torch.Tensor, prompt_mask: torch.Tensor | None = None,
                mode=None):
        mode = self.mode if mode is None else FusionMode(mode)
        self.last_scores = None
        if mode is FusionMode.NONE:
            return x, p
        if p.dim() == 2:
            p = p.unsqueeze(0).expand(x.shape[0], -1, -1)
        if prompt_mask is None:
            prompt_mask = torch.ones(p.shape[:2], dtype=torch.bool)
        pad = torch.where(prompt_mask, 0.0, GATE_SENTINEL).to(x.dtype)

        if mode is FusionMode.SELECTIVE:
            s = self.presence_scores(x, p)
            self.last_scores = s
            gate = torch.minimum(gate_from_scores(s, self.threshold).to(x.dtype), pad)
        else:
            gate = pad
        open_prompt = gate > GATE_SENTINEL / 2

        # prompt -> image: prompts are keys
        attn = attention_weights(self.q_x(x), self.k_p(p), gate)
        upd_x = self.out_x(attn @ self.v_p(p))
        any_open = open_prompt.any(dim=-1)
        x_new = x + torch.where(any_open[:, None, None], upd_x, torch.zeros_like(upd_x))

        # image -> prompt: only open prompts are updated
        attn_p = attention_weights(self.q_p(p), self.k_x(x))
        upd_p = self.out_p(attn_p @ self.v_x(x))
        p_new = p + torch.where(open_prompt[..., None], upd_p, torch.zeros_like(upd_p))
        return x_new, p_new

    def presence_loss(self, present: torch.Tensor, fp: FocalParams = FocalParams(),
                      prompt_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Focal loss of the per-prompt peak score against image-level presence."""
        if self.last_scores is None:
            raise RuntimeError("presence_loss needs a preceding selective forward pass")
        peak = self.last_scores.amax(dim=-2)
        return focal_classification_loss(peak, present.to(peak.dtype), fp, mask=prompt_mask)
