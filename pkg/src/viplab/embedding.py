"""Embedding algebra: normalization, cosine similarity and prompt scoring.

Every function accepts either a ``torch.Tensor`` or anything numpy can turn
into an array. Numpy inputs are evaluated in float64 and returned as numpy;
tensors stay tensors (and keep their autograd graph).
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.special import expit

from .errors import DimensionMismatchError, ZeroNormError


def _to_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def _back(t: torch.Tensor, was_numpy: bool):
    return t.detach().numpy() if was_numpy else t


def _check_rows(t: torch.Tensor) -> torch.Tensor:
    norms = t.norm(dim=-1)
    zero = (norms == 0).nonzero()
    if len(zero):
        raise ZeroNormError(int(zero[0, -1]))
    return norms


def l2_normalize(m):
    """Scale every row to unit Euclidean norm; zero rows are an error."""
    t, was_np = _to_tensor(m)
    norms = _check_rows(t)
    return _back(t / norms.unsqueeze(-1), was_np)


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarity, shape ``len(a) x len(b)``."""
    ta, np_a = _to_tensor(a)
    tb, np_b = _to_tensor(b)
    if ta.shape[-1] != tb.shape[-1]:
        raise DimensionMismatchError(f"dims differ: {ta.shape[-1]} vs {tb.shape[-1]}")
    na = _check_rows(ta)
    nb = _check_rows(tb)
    sim = (ta @ tb.transpose(-1, -2)) / (na.unsqueeze(-1) * nb.unsqueeze(-2))
    return _back(sim.clamp(-1.0, 1.0), np_a and np_b)


def prompt_logits(o, p, b=0.0):
    """Unnormalized ``O P^T + b``; the pre-sigmoid form of :func:`prompt_score`."""
    to, np_o = _to_tensor(o)
    tp, np_p = _to_tensor(p)
    if to.shape[-1] != tp.shape[-1]:
        raise DimensionMismatchError(f"dims differ: {to.shape[-1]} vs {tp.shape[-1]}")
    return _back(to @ tp.transpose(-1, -2) + b, np_o and np_p)


def prompt_score(o, p, b=0.0):
    """sigmoid(O P^T + b). O and P are deliberately left unnormalized."""
    logits = prompt_logits(o, p, b)
    if isinstance(logits, torch.Tensor):
        return torch.sigmoid(logits)
    return expit(logits)
