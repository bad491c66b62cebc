"""Differentiable training objectives.

All losses are written against torch tensors so that autograd supplies the
analytic gradient. Boxes are ``(cx, cy, w, h)`` in normalized image units.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateInputWarning, NumericAbort

SCORE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_align: float = 1.0
    lambda_distill: float = 10.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class Temperatures:
    tau_t: float = 0.07
    tau_v: float = 0.1

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_v <= 0:
            raise ValueError("temperatures must be positive")


def focal_terms(scores: torch.Tensor, fp: FocalParams = FocalParams()):
    """Per-entry positive and negative focal terms, both >= 0."""
    eps = max(SCORE_EPS, torch.finfo(scores.dtype).eps)  # 1 - 1e-8 rounds to 1 in float32
    s = scores.clamp(eps, 1.0 - eps)
    pos = -fp.alpha * (1.0 - s) ** fp.gamma * torch.log(s)
    neg = -fp.alpha * s**fp.gamma * torch.log1p(-s)
    return pos, neg


def focal_classification_loss(
    scores: torch.Tensor,
    targets: torch.Tensor,
    fp: FocalParams = FocalParams(),
    mask: torch.Tensor | None = None,
    num_pos: float | None = None,
) -> torch.Tensor:
    """Focal loss over sigmoid scores, normalized by the positive count (floor 1).

    ``mask`` drops entries (e.g. padded prompt columns); ``num_pos`` overrides
    the normalizer so a batch can share one count.
    """
    if scores.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(scores.shape)} vs {tuple(targets.shape)}")
    targets = targets.to(scores.dtype)
    pos, neg = focal_terms(scores, fp)
    per_entry = targets * pos + (1.0 - targets) * neg
    if mask is not None:
        per_entry = torch.where(mask.to(torch.bool), per_entry, torch.zeros_like(per_entry))
    if num_pos is None:
        num_pos = float(targets.sum())
    return per_entry.sum() / max(num_pos, 1.0)


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def pairwise_iou_xyxy(a: torch.Tensor, b: torch.Tensor):
    """IoU and union for every pair, ``a`` is N x 4, ``b`` is M x 4."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    return inter / union, union


def pairwise_giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    iou, union = pairwise_iou_xyxy(a, b)
    lt = torch.minimum(a[:, None, :2], b[None, :, :2])
    rb = torch.maximum(a[:, None, 2:], b[None, :, 2:])
    enclosing = (rb - lt).clamp(min=0).prod(-1)
    return iou - (enclosing - union) / enclosing


def giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of corner-format boxes with matching leading shape."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = _area(a) + _area(b) - inter
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    enclosing = (erb - elt).clamp(min=0).prod(-1)
    return inter / union - (enclosing - union) / enclosing


def giou(a, b) -> torch.Tensor:
    """GIoU of ``(cx, cy, w, h)`` boxes (broadcasts over leading dims)."""
    a = torch.as_tensor(a, dtype=torch.float64) if not isinstance(a, torch.Tensor) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not isinstance(b, torch.Tensor) else b
    return giou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))


def box_regression_loss(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean absolute coordinate error and mean ``1 - GIoU`` over matched pairs."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.numel() == 0:
        zero = pred.sum() * 0.0
        return zero, zero
    l1 = (pred - gt).abs().mean()
    giou_loss = (1.0 - giou(pred, gt)).mean()
    return l1, giou_loss


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def alignment_loss(
    prompts: torch.Tensor, texts: torch.Tensor, labels, tau: float = 0.07
) -> torch.Tensor:
    """Symmetric InfoNCE between visual prompts and text rows.

    ``labels[i]`` is the text row index of prompt i. The prompt->text direction
    is a cross-entropy over all text rows; the text->prompt direction scores
    each text row with matching prompts by the summed softmax mass it puts on
    those prompts. The result is the mean of both directions.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_text = texts.shape[0]
    if len(labels) and (labels.min() < 0 or labels.max() >= n_text):
        bad = labels[(labels < 0) | (labels >= n_text)][0].item()
        raise ValueError(f"label {bad} has no text row")
    p = _unit_rows(prompts)
    t = _unit_rows(texts)
    logits = p @ t.T / tau
    p2t = F.cross_entropy(logits, labels)

    match = labels[None, :] == torch.arange(n_text)[:, None]  # text x prompt
    has_match = match.any(dim=1)
    log_prob = torch.log_softmax(logits.T[has_match], dim=1)
    pos_mass = torch.logsumexp(log_prob.masked_fill(~match[has_match], -math.inf), dim=1)
    t2p = -pos_mass.mean()
    return 0.5 * (p2t + t2p)


def supervised_contrastive_loss(prompts: torch.Tensor, labels, tau: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss; the anchor is excluded from its own denominator.

    Averaged over anchors that have at least one positive. When every label is
    unique a zero loss is returned together with a ``DegenerateInputWarning``.
    """
    labels = torch.as_tensor(labels)
    n = prompts.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    if not bool((n_pos > 0).any()):
        warnings.warn("all labels unique; supervised contrastive loss is 0", DegenerateInputWarning)
        return prompts.sum() * 0.0
    p = _unit_rows(prompts)
    logits = (p @ p.T / tau).masked_fill(eye, -math.inf)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    anchors = n_pos > 0
    per_anchor = -log_prob.sum(1)[anchors] / n_pos[anchors]
    return per_anchor.mean()


def relation_distillation_loss(
    prompts: torch.Tensor, texts: torch.Tensor, temps: Temperatures = Temperatures()
) -> torch.Tensor:
    """Row-wise cross-entropy of the prompt relation softmax against the text one.

    Row i of ``texts`` is the text feature of prompt i's category. Both sides are
    L2-normalized internally; the diagonal stays in both distributions.
    """
    n = prompts.shape[0]
    if n < 2:
        raise ValueError(f"relation distillation needs at least 2 prompts, got {n}")
    if texts.shape[0] != n:
        raise ValueError(f"need one text row per prompt: {texts.shape[0]} vs {n}")
    p = _unit_rows(prompts)
    c = _unit_rows(texts)
    teacher = torch.softmax(c @ c.T / temps.tau_t, dim=1)
    log_student = torch.log_softmax(p @ p.T / temps.tau_v, dim=1)
    return -(teacher * log_student).sum(1).mean()


_WEIGHT_FOR = {
    "cls": "lambda_cls",
    "presence": "lambda_cls",
    "l1": "lambda_l1",
    "giou": "lambda_giou",
    "align": "lambda_align",
    "distill": "lambda_distill",
    "scl": "lambda_distill",
}


def total_loss(parts: dict, w: LossWeights = LossWeights()):
    """Weighted sum of named loss parts.

    Recognized names are cls, l1, giou, align and distill; ``scl`` (the
    contrastive substitute for distill) shares ``lambda_distill`` and
    ``presence`` (auxiliary gate branch) shares ``lambda_cls``.
    """
    total = 0.0
    for name, value in parts.items():
        if name not in _WEIGHT_FOR:
            raise KeyError(f"unknown loss part {name!r}")
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericAbort(f"loss part {name!r} is not finite ({v})")
        total = total + getattr(w, _WEIGHT_FOR[name]) * value
    return total
