"""Toy visual-prompted DETR: backbone, prompt encoder, fusion-capable encoder and decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from torchvision.ops import batched_nms

from ..fusion import FusionLayer, FusionMode
from ..losses import box_cxcywh_to_xyxy
from ..prompt_encoder import BoxSpec, DeformableSampler, PromptEncoder, sine_cosine_box_encoding
from .matching import Detection


@dataclass
class DetectorConfig:
    dim: int = 32
    grid: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    prompt_layers: int = 3
    n_heads: int = 2
    n_points: int = 4
    top_k: int = 20
    score_threshold: float = 0.05
    nms_iou: float | None = 0.5  # class-wise suppression of duplicate queries; None disables
    encoder_fusion: str = "none"
    decoder_fusion: str = "none"
    fusion_threshold: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def _mlp(dim, out, hidden=None):
    hidden = hidden or dim
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, out))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, fusion: FusionMode, threshold: float):
        super().__init__()
        self.fusion = FusionLayer(dim, fusion, threshold) if fusion is not FusionMode.NONE else None
        self.mix = nn.Conv2d(dim, dim, 5, padding=2, groups=dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = _mlp(dim, dim, 2 * dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, p, mask, size, mode=None):
        if self.fusion is not None:
            x, p = self.fusion(x, p, mask, mode=mode)
        b, l, d = x.shape
        grid = x.transpose(1, 2).reshape(b, d, size, size)
        x = self.norm1(x + self.mix(grid).flatten(2).transpose(1, 2))
        x = self.norm2(x + self.ffn(x))
        return x, p


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, n_points: int, fusion: FusionMode, threshold: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.fusion = FusionLayer(dim, fusion, threshold) if fusion is not FusionMode.NONE else None
        self.cross = DeformableSampler(dim, n_heads, n_points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _mlp(dim, dim, 2 * dim)
        self.norm3 = nn.LayerNorm(dim)
        self.box_delta = _mlp(dim, 4)
        nn.init.zeros_(self.box_delta[-1].weight)
        nn.init.zeros_(self.box_delta[-1].bias)

    def forward(self, q, pos, ref, values, p, mask, mode=None):
        qp = q + pos
        q = self.norm1(q + self.self_attn(qp, qp, q, need_weights=False)[0])
        if self.fusion is not None:
            q, p = self.fusion(q, p, mask, mode=mode)
        q = self.norm2(q + self.cross(q + pos, ref, values))
        q = self.norm3(q + self.ffn(q))
        box = torch.sigmoid(inverse_sigmoid(ref) + self.box_delta(q))
        return q, p, box


class ToyDetector(nn.Module):
    """Single-scale DETR with prompt-based scoring ``sigmoid(O P^T + b)``."""

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.backbone = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1), nn.GELU(), nn.Conv2d(d, d, 1)
        )
        self.prompt_encoder = PromptEncoder(d, cfg.prompt_layers, cfg.n_heads, cfg.n_points)
        enc_mode, dec_mode = FusionMode(cfg.encoder_fusion), FusionMode(cfg.decoder_fusion)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, enc_mode, cfg.fusion_threshold) for _ in range(cfg.enc_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, cfg.n_heads, cfg.n_points, dec_mode, cfg.fusion_threshold)
            for _ in range(cfg.dec_layers)
        )
        self.pos_proj = nn.Linear(d + (-d) % 8, d)
        self.enc_out = nn.Linear(d, d)
        self.enc_box = _mlp(d, 4)
        self.dec_out = nn.Linear(d, d)
        self.bias = nn.Parameter(torch.tensor(-math.log(99.0)))

        self._identity_init()

        size = cfg.grid
        c = (torch.arange(size, dtype=torch.float32) + 0.5) / size
        cy, cx = torch.meshgrid(c, c, indexing="ij")
        anchors = torch.stack([cx, cy, torch.full_like(cx, 0.2), torch.full_like(cy, 0.2)], -1)
        self.register_buffer("anchors", anchors.reshape(-1, 4), persistent=False)

    @torch.no_grad()
    def _identity_init(self):
        """Start every feature path as (near) identity so prompt scores are feature
        similarities from the first step."""
        eye = torch.eye(self.cfg.dim)
        conv = self.backbone[0]
        conv.weight.mul_(0.1)
        conv.weight[:, :, 1, 1] += eye
        self.backbone[2].weight.copy_(eye[..., None, None])
        for lin in [self.enc_out, self.dec_out]:
            lin.weight.copy_(eye)
            lin.bias.zero_()
        for sampler in self.prompt_encoder.samplers:
            for lin in (sampler.value, sampler.output):
                lin.weight.copy_(eye)
                lin.bias.zero_()

    def backbone_parameters(self):
        return self.backbone.parameters()

    def features(self, grids: torch.Tensor) -> torch.Tensor:
        """(B, H, W, D) scene grids -> (B, D, H, W) backbone features."""
        return self.backbone(grids.permute(0, 3, 1, 2))

    def encode_prompts(self, feats, boxes, mask, grid_index) -> torch.Tensor:
        """Category prompts (class-token rows) for padded box groups."""
        return self.prompt_encoder.encode_groups(feats, boxes, mask, grid_index)[1]

    def _box_pos(self, boxes):
        return self.pos_proj(sine_cosine_box_encoding(boxes, self.pos_proj.in_features))

    def detect(self, feats: torch.Tensor, prompts: torch.Tensor, prompt_mask: torch.Tensor | None = None,
               encoder_mode=None, decoder_mode=None) -> dict:
        """Run encoder and decoder against a prompt bank.

        prompts: (N, D) shared or (B, N, D) per image; prompt_mask (B, N).
        Returns scores/boxes for encoder proposals and every decoder layer.
        """
        b, d, h, w = feats.shape
        if prompts.dim() == 2:
            prompts = prompts.unsqueeze(0).expand(b, -1, -1)
        if prompt_mask is None:
            prompt_mask = torch.ones(prompts.shape[:2], dtype=torch.bool)
        x = feats.flatten(2).transpose(1, 2) + self._box_pos(self.anchors)
        p = prompts
        fusion_layers = []
        for layer in self.encoder:
            x, p = layer(x, p, prompt_mask, h, mode=encoder_mode)
            if layer.fusion is not None:
                fusion_layers.append(layer.fusion)

        neg = torch.finfo(x.dtype).min
        enc_logits = self.enc_out(x) @ p.transpose(1, 2) + self.bias
        enc_boxes = torch.sigmoid(inverse_sigmoid(self.anchors) + self.enc_box(x))
        ranking = enc_logits.masked_fill(~prompt_mask[:, None, :], neg).amax(-1)
        k = min(self.cfg.top_k, ranking.shape[1])
        top = ranking.topk(k, dim=1).indices
        q = torch.gather(x, 1, top[..., None].expand(-1, -1, d))
        ref = torch.gather(enc_boxes, 1, top[..., None].expand(-1, -1, 4)).detach()

        mem = x.transpose(1, 2).reshape(b, d, h, w)
        layers_out = []
        for layer in self.decoder:
            values = layer.cross.value_map(mem)
            q, p, box = layer(q, self._box_pos(ref), ref, values, p, prompt_mask, mode=decoder_mode)
            if layer.fusion is not None:
                fusion_layers.append(layer.fusion)
            logits = self.dec_out(q) @ p.transpose(1, 2) + self.bias
            layers_out.append({"logits": logits, "boxes": box})
            ref = box.detach()
        return {
            "enc": {"logits": enc_logits, "boxes": enc_boxes},
            "dec": layers_out,
            "prompt_mask": prompt_mask,
            "fusion_layers": fusion_layers,
        }


def scene_tensor(scenes) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.grid for s in scenes]).astype("float32"))


@torch.no_grad()
def forward(model: ToyDetector, scenes, bank, fusion_mode=None, score_threshold=None) -> list:
    """Detections per scene for a bank of category prompts.

    ``bank`` is a ``PromptBank`` shared by every scene, or a list with one bank
    per scene. ``fusion_mode`` overrides both encoder and decoder fusion modes
    of layers that carry fusion.
    """
    single = not isinstance(scenes, (list, tuple))
    scenes = [scenes] if single else list(scenes)
    thr = model.cfg.score_threshold if score_threshold is None else score_threshold
    model.eval()
    feats = model.features(scene_tensor(scenes))
    if isinstance(bank, (list, tuple)):
        n = max(len(bk) for bk in bank)
        prompts = torch.zeros(len(scenes), n, model.cfg.dim)
        mask = torch.zeros(len(scenes), n, dtype=torch.bool)
        labels = []
        for i, bk in enumerate(bank):
            prompts[i, : len(bk)] = bk.prototypes
            mask[i, : len(bk)] = True
            labels.append(list(bk.labels))
    else:
        if len(bank) == 0:
            raise ValueError("empty prompt bank")
        prompts, mask = bank.prototypes, None
        labels = [list(bank.labels)] * len(scenes)
    out = model.detect(feats, prompts.to(feats.dtype), mask, fusion_mode, fusion_mode)
    last = out["dec"][-1]
    probs = torch.sigmoid(last["logits"]).masked_fill(~out["prompt_mask"][:, None, :], 0.0)
    results = []
    for i in range(len(scenes)):
        dets = []
        qi, ci = (probs[i] > thr).nonzero(as_tuple=True)
        if model.cfg.nms_iou is not None and len(qi):
            keep = batched_nms(box_cxcywh_to_xyxy(last["boxes"][i, qi]), probs[i, qi, ci], ci,
                               model.cfg.nms_iou)
            qi, ci = qi[keep], ci[keep]
        for qq, cc in zip(qi.tolist(), ci.tolist()):
            box = BoxSpec(*last["boxes"][i, qq].tolist())
            dets.append(Detection(box, float(probs[i, qq, cc]), labels[i][cc]))
        dets.sort(key=lambda det: -det.score)
        results.append(dets)
    return results[0] if single else results
