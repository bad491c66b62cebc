"""Global prompt integration: batch-wide per-category prototypes."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Hashable, Sequence

import torch


@dataclass
class PromptBatchEntry:
    prompt: torch.Tensor
    label: Hashable
    source_sample: int = 0


@dataclass
class PromptBank:
    """Ordered category labels with one prototype row each (first-occurrence order)."""

    labels: list
    prototypes: torch.Tensor

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("bank labels must be unique")
        if self.prototypes.shape[0] != len(self.labels):
            raise ValueError(
                f"{self.prototypes.shape[0]} prototypes for {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)

    def subset(self, labels: Sequence) -> "PromptBank":
        rows = [self.index(lbl) for lbl in labels]
        return PromptBank(list(labels), self.prototypes[rows])

    def sorted(self) -> "PromptBank":
        order = sorted(range(len(self.labels)), key=lambda i: self.labels[i])
        return PromptBank([self.labels[i] for i in order], self.prototypes[order])


def integrate_prompt_rows(prompts: torch.Tensor, labels: Sequence) -> PromptBank:
    """Tensor form of :func:`integrate_prompts`: mean prompt per unique label.

    Differentiable; each prototype keeps a gradient path to every prompt that
    contributed to it, including prompts from other samples.
    """
    if len(labels) == 0:
        raise ValueError("cannot integrate an empty prompt batch")
    if prompts.shape[0] != len(labels):
        raise ValueError(f"{prompts.shape[0]} prompts for {len(labels)} labels")
    order: list = []
    slot: dict = {}
    for lbl in labels:
        if lbl not in slot:
            slot[lbl] = len(order)
            order.append(lbl)
    idx = torch.tensor([slot[lbl] for lbl in labels])
    sums = torch.zeros(len(order), prompts.shape[1], dtype=prompts.dtype).index_add(0, idx, prompts)
    counts = torch.bincount(idx, minlength=len(order)).to(prompts.dtype)
    return PromptBank(order, sums / counts[:, None])


def integrate_prompts(entries: Sequence[PromptBatchEntry]) -> PromptBank:
    """Gather prompts from every sample and average them per label."""
    if not entries:
        raise ValueError("cannot integrate an empty prompt batch")
    prompts = torch.stack([torch.as_tensor(e.prompt) for e in entries])
    return integrate_prompt_rows(prompts, [e.label for e in entries])


def bank_as_classifier(bank: PromptBank) -> torch.Tensor:
    """Prototype matrix in bank order, used directly as P in prompt scoring."""
    if len(bank) == 0:
        raise ValueError("empty prompt bank")
    return bank.prototypes


_LEADING = {"a", "an", "the", "two", "three", "some", "several"}
# words whose trailing s is not a plural marker, and irregular plurals
_SINGULAR_EXCEPTIONS = {
    "bus": "bus", "buses": "bus", "glass": "glass", "grass": "grass", "dress": "dress", "gas": "gas",
    "lens": "lens", "news": "news", "species": "species", "series": "series",
    "people": "person", "men": "man", "women": "woman", "children": "child",
    "mice": "mouse", "geese": "goose", "feet": "foot", "teeth": "tooth",
}
_ES_ENDINGS = ("ches", "shes", "sses", "xes")


def _singularize(word: str) -> str:
    if word in _SINGULAR_EXCEPTIONS:
        return _SINGULAR_EXCEPTIONS[word]
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(_ES_ENDINGS):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")) and len(word) > 3:
        return word[:-1]
    return word


def normalize_phrase(phrase: str) -> str:
    """Reduce a grounding phrase to a canonical category label (its head noun lemma).

    >>> normalize_phrase("a short and white dog"), normalize_phrase("two dogs")
    ('dog', 'dog')
    """
    if not phrase or not phrase.strip():
        raise ValueError("empty phrase")
    lowered = phrase.strip().lower()
    words = re.findall(r"[a-z0-9]+(?:[-'][a-z0-9]+)*", lowered)
    while words and words[0] in _LEADING:
        words.pop(0)
    if not words:
        return lowered
    return _singularize(words[-1])
