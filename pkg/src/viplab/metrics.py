"""Embedding-space diagnostics: IISR, similarity histograms, 2-D projection, dumps."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import cosine_similarity_matrix
from .errors import DegenerateInputWarning, DegenerateInterSimilarityError, DumpFormatError

HIST_BINS = np.linspace(-1.0, 1.0, 51)
DENOMINATOR_FLOOR = 1e-9


@dataclass
class LabeledEmbeddings:
    embeddings: np.ndarray
    labels: list

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        self.labels = list(self.labels)
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.embeddings.shape[0]} embeddings")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite entries")

    def groups(self) -> dict:
        """label -> row indices, in first-occurrence order."""
        out: dict = {}
        for i, lbl in enumerate(self.labels):
            out.setdefault(lbl, []).append(i)
        return out


@dataclass
class SimilarityReport:
    intra_values: np.ndarray
    inter_values: np.ndarray
    iisr: float | None
    bins: np.ndarray = field(default_factory=lambda: HIST_BINS.copy())
    negative_denominator: bool = False

    @property
    def intra_hist(self) -> np.ndarray:
        return np.histogram(self.intra_values, bins=self.bins)[0]

    @property
    def inter_hist(self) -> np.ndarray:
        return np.histogram(self.inter_values, bins=self.bins)[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "bin_lo", "bin_hi", "count"])
            for kind, hist in (("intra", self.intra_hist), ("inter", self.inter_hist)):
                for lo, hi, n in zip(self.bins[:-1], self.bins[1:], hist):
                    w.writerow([kind, repr(float(lo)), repr(float(hi)), int(n)])
            w.writerow(["iisr", "" if self.iisr is None else repr(self.iisr)])


def _iisr_parts(data: LabeledEmbeddings) -> tuple[float, float]:
    groups = data.groups()
    if len(groups) < 2:
        raise ValueError("IISR needs at least 2 categories")
    intra = []
    means = []
    for lbl, rows in groups.items():
        if len(rows) < 2:
            raise ValueError(f"category {lbl!r} has fewer than 2 members")
        emb = data.embeddings[rows]
        sim = cosine_similarity_matrix(emb, emb)
        iu = np.triu_indices(len(rows), k=1)
        intra.append(sim[iu].mean())
        means.append(emb.mean(axis=0))
    means = np.stack(means)
    msim = cosine_similarity_matrix(means, means)
    iu = np.triu_indices(len(means), k=1)
    return float(np.mean(intra)), float(msim[iu].mean())


def iisr(data: LabeledEmbeddings) -> float:
    """Intra-inter similarity ratio.

    Mean (over categories) of mean pairwise within-category cosine similarity,
    divided by the mean pairwise cosine similarity of category mean vectors.
    Means are taken on the raw embeddings. A negative denominator yields a
    negative ratio plus a ``DegenerateInputWarning``.
    """
    num, den = _iisr_parts(data)
    if abs(den) <= DENOMINATOR_FLOOR:
        raise DegenerateInterSimilarityError(f"degenerate inter-similarity ({den:.3g})")
    if den < 0:
        warnings.warn("negative inter-category similarity; IISR sign flipped", DegenerateInputWarning)
    return num / den


def similarity_distributions(data: LabeledEmbeddings) -> SimilarityReport:
    """All within-category pairs (i > j) and all cross-category pairs, plus IISR when defined."""
    if len(set(data.labels)) < 2:
        raise ValueError("need at least 2 categories")
    sim = cosine_similarity_matrix(data.embeddings, data.embeddings)
    i, j = np.triu_indices(len(data.labels), k=1)
    same = np.array([data.labels[a] == data.labels[b] for a, b in zip(i, j)], dtype=bool)
    pair_sim = sim[i, j]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateInputWarning)
            value = iisr(data)
    except (ValueError, DegenerateInterSimilarityError):
        value = None
    return SimilarityReport(pair_sim[same], pair_sim[~same], value,
                            negative_denominator=value is not None and value < 0)


@dataclass
class Projection:
    coords: np.ndarray
    rank_deficient: bool = False


def project_2d(data: LabeledEmbeddings) -> Projection:
    """Top-two principal components of the mean-centred embeddings.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    x = data.embeddings
    if x.shape[0] < 3:
        raise ValueError("projection needs at least 3 points")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    coords = centred @ comps.T
    tol = max(centred.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    deficient = len(s) < 2 or s[1] <= max(tol, 1e-12)
    if coords.shape[1] < 2:
        coords = np.column_stack([coords, np.zeros(len(coords))])
    if deficient:
        coords[:, 1] = 0.0
        warnings.warn("embedding rank < 2; second coordinate set to 0", DegenerateInputWarning)
    return Projection(coords, deficient)


def write_dump(data: LabeledEmbeddings, path) -> None:
    """Text dump: ``N D`` header then ``label<TAB>floats`` rows at 17 significant digits."""
    n, d = data.embeddings.shape
    lines = [f"{n} {d}"]
    for lbl, row in zip(data.labels, data.embeddings):
        text = str(lbl)
        if "\t" in text or "\n" in text:
            raise ValueError(f"label {text!r} contains a tab or newline")
        lines.append(text + "\t" + " ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dump(path) -> LabeledEmbeddings:
    raw = Path(path).read_text(encoding="utf-8").splitlines()
    if not raw or not raw[0].strip():
        raise DumpFormatError("missing header")
    try:
        n, d = (int(t) for t in raw[0].split())
    except ValueError:
        raise DumpFormatError(f"malformed header at line 1: {raw[0]!r}") from None
    body = [ln for ln in raw[1:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise DumpFormatError(f"expected {n} rows, found {len(body)} at line {len(body) + 2}")
    labels, rows = [], []
    for lineno, line in enumerate(body, start=2):
        if "\t" not in line:
            raise DumpFormatError(f"missing tab separator at line {lineno}")
        lbl, values = line.split("\t", 1)
        try:
            vec = [float(v) for v in values.split()]
        except ValueError:
            raise DumpFormatError(f"non-numeric value at line {lineno}") from None
        if len(vec) != d:
            raise DumpFormatError(f"expected {d} values, found {len(vec)} at line {lineno}")
        labels.append(lbl)
        rows.append(vec)
    return LabeledEmbeddings(np.array(rows, dtype=np.float64).reshape(n, d), labels)


def pair_counts(labels: Sequence) -> tuple[int, int]:
    """Closed-form (intra, inter) pair counts for a label list."""
    n = len(labels)
    sizes = np.unique(np.asarray([str(l) for l in labels]), return_counts=True)[1]
    intra = int((sizes * (sizes - 1) // 2).sum())
    return intra, n * (n - 1) // 2 - intra
