"""OOD-detection and calibration metrics with brute-force-checkable semantics.

Scores follow the higher-is-ID convention throughout. The FPR-at-TPR
estimator scans the finite candidate threshold set (all distinct scores plus
-inf) and never interpolates: it picks the largest threshold whose TPR still
meets the target, the most conservative choice consistent with it.
"""

from __future__ import annotations

import numpy as np


def _check_scores(scores, name: str) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank (exact halves)."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    new_group = np.r_[True, xs[1:] != xs[:-1]]
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    starts = np.cumsum(counts) - counts
    avg = starts + (counts + 1) / 2.0  # mean of ranks starts+1 .. starts+counts
    ranks = np.empty_like(x)
    ranks[order] = avg[group]
    return ranks


def auroc(id_scores, ood_scores) -> float:
    """Probability a random ID score exceeds a random OOD score, ties at 0.5.

    Computed from sorted average ranks in O(n log n); equals the O(n^2)
    Mann-Whitney pair count exactly, ties included.
    """
    ids = _check_scores(id_scores, "id_scores")
    oods = _check_scores(ood_scores, "ood_scores")
    ranks = _average_ranks(np.concatenate([ids, oods]))
    n_id = ids.size
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * oods.size))


def auroc_pairs(id_scores, ood_scores) -> float:
    """Brute-force O(n^2) pair-counting AUROC; the oracle for auroc()."""
    ids = _check_scores(id_scores, "id_scores")
    oods = _check_scores(ood_scores, "ood_scores")
    wins = (ids[:, None] > oods[None, :]).sum()
    ties = (ids[:, None] == oods[None, :]).sum()
    return float((wins + 0.5 * ties) / (ids.size * oods.size))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """FPR at the largest threshold whose TPR reaches the target.

    Candidate thresholds are all distinct scores plus -inf; TPR(mu) counts
    ID scores >= mu. No interpolation.
    """
    if not 0 < tpr_target <= 1:
        raise ValueError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    ids = _check_scores(id_scores, "id_scores")
    oods = _check_scores(ood_scores, "ood_scores")
    id_sorted = np.sort(ids)
    candidates = np.unique(np.concatenate([ids, oods]))[::-1]  # descending
    # TPR is non-decreasing as the threshold drops; take the first qualifier
    tpr = (ids.size - np.searchsorted(id_sorted, candidates, side="left")) / ids.size
    qualifying = np.flatnonzero(tpr >= tpr_target)
    if qualifying.size == 0:
        mu = -np.inf  # TPR at -inf is 1, so this never actually happens
    else:
        mu = candidates[qualifying[0]]
    return float(np.count_nonzero(oods >= mu) / oods.size)


def fpr_at_tpr_scan(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Exhaustive threshold scan; the oracle for fpr_at_tpr()."""
    if not 0 < tpr_target <= 1:
        raise ValueError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    ids = _check_scores(id_scores, "id_scores")
    oods = _check_scores(ood_scores, "ood_scores")
    best_mu = None
    for mu in sorted(set(ids.tolist()) | set(oods.tolist()) | {-np.inf}):
        if np.mean(ids >= mu) >= tpr_target and (best_mu is None or mu > best_mu):
            best_mu = mu
    return float(np.mean(oods >= best_mu))


def id_accuracy(predictions, labels) -> float:
    """Fraction of predicted class indices equal to the labels."""
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(labels).reshape(-1)
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"id_accuracy: need equal non-empty lists, got {p.size} vs {t.size}")
    return float(np.mean(p == t))


def ece(confidences, correct, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bins partition (0, 1] right-inclusively; a confidence of exactly 0 falls
    into bin 1. Empty bins contribute nothing. The result is the bin-size
    weighted mean absolute gap between accuracy and mean confidence.
    """
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size == 0 or conf.size != corr.size:
        raise ValueError("ece: confidences and correct must be equal-length and non-empty")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("ece: confidences must lie in [0, 1]")
    if n_bins < 1:
        raise ValueError(f"ece: n_bins must be >= 1, got {n_bins}")
    idx = np.ceil(conf * n_bins).astype(int)
    idx = np.clip(idx, 1, n_bins)  # confidence 0 joins the first bin
    total = 0.0
    n = conf.size
    for b in range(1, n_bins + 1):
        mask = idx == b
        if not np.any(mask):
            continue
        acc = float(np.mean(corr[mask]))
        avg_conf = float(np.mean(conf[mask]))
        total += (mask.sum() / n) * abs(acc - avg_conf)
    return float(total)
