"""Mining ID-irrelevant surrogate-OOD regions from local feature maps.

Three criteria are supported, each applied to the per-region class
probabilities: rank of the ground-truth label exceeding K, ground-truth
probability below 1/M, and entropy below half the maximum (log M)/2.
All thresholds are strict inequalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import FeatureMap
from .numerics import cosine_matrix, safe_log, softmax


@dataclass(frozen=True)
class RegionSelection:
    """Selected region indices plus the probabilities every region received."""

    indices: tuple[int, ...]
    method: str  # "rank" | "prob" | "entropy"
    per_region_probs: np.ndarray  # (n_regions, m)
    rank_k: int | None = None

    def __post_init__(self):
        n = self.per_region_probs.shape[0]
        if any(i < 0 or i >= n for i in self.indices):
            raise ValueError("RegionSelection: index outside the region grid")


def region_probs(fm: FeatureMap, text_feats: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities for every region: softmax of cosine sims over tau."""
    return softmax(cosine_matrix(fm.local_feats, text_feats), tau)


def rank_of_label(p: np.ndarray, y: int) -> int:
    """1-based rank of class y in the probability vector p.

    Ties are broken deterministically: classes with equal probability and a
    lower index rank ahead of y.
    """
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[0]:
        raise ValueError(f"rank_of_label: label {y} outside [0, {p.shape[0]})")
    py = p[y]
    ahead = int(np.sum(p > py)) + int(np.sum(p[:y] == py))
    return 1 + ahead


def label_ranks(probs: np.ndarray, y: int) -> np.ndarray:
    """rank_of_label applied to every row of a (n_regions, m) array."""
    probs = np.asarray(probs, dtype=np.float64)
    py = probs[:, y : y + 1]
    greater = (probs > py).sum(axis=1)
    tied_lower = (probs[:, :y] == py).sum(axis=1)
    return 1 + greater + tied_lower


def select_rank(probs: np.ndarray, y: int, k: int) -> np.ndarray:
    """Indices of rows whose ground-truth rank strictly exceeds k."""
    if k < 0:
        raise ValueError(f"select_rank: k must be >= 0, got {k}")
    return np.flatnonzero(label_ranks(probs, y) > k)


def select_prob(probs: np.ndarray, y: int) -> np.ndarray:
    """Indices of rows where the ground-truth probability is below 1/m."""
    probs = np.asarray(probs, dtype=np.float64)
    m = probs.shape[1]
    return np.flatnonzero(probs[:, y] < 1.0 / m)


def select_entropy(probs: np.ndarray) -> np.ndarray:
    """Indices of rows whose entropy is below (log m)/2. Label-free."""
    probs = np.asarray(probs, dtype=np.float64)
    m = probs.shape[1]
    if m < 2:
        raise ValueError("select_entropy: needs at least 2 classes")
    ent = -(probs * safe_log(probs)).sum(axis=1)
    return np.flatnonzero(ent < 0.5 * np.log(m))


def extract_rank(
    fm: FeatureMap, text_feats: np.ndarray, y: int, k: int, tau: float
) -> RegionSelection:
    """Regions whose ground-truth label ranks strictly worse than k."""
    probs = region_probs(fm, text_feats, tau)
    idx = select_rank(probs, y, k)
    return RegionSelection(tuple(int(i) for i in idx), "rank", probs, rank_k=int(k))


def extract_prob(fm: FeatureMap, text_feats: np.ndarray, y: int, tau: float) -> RegionSelection:
    """Regions whose ground-truth probability falls below the uniform 1/m."""
    probs = region_probs(fm, text_feats, tau)
    idx = select_prob(probs, y)
    return RegionSelection(tuple(int(i) for i in idx), "prob", probs)


def extract_entropy(fm: FeatureMap, text_feats: np.ndarray, tau: float) -> RegionSelection:
    """Regions with entropy below half the maximum; ignores the label."""
    probs = region_probs(fm, text_feats, tau)
    idx = select_entropy(probs)
    return RegionSelection(tuple(int(i) for i in idx), "entropy", probs)
