"""Stable softmax machinery, cosine similarity, seeded randomness, and a
finite-difference gradient oracle shared by every other module.

All arithmetic is 64-bit floating point.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Probabilities are clamped here before any logarithm; entropy-style terms
# are undefined at exact zeros.
PROB_FLOOR = 1e-12


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Seeded PCG64 generator.

    Extra integer tags derive independent substreams from the same master
    seed (one stream per purpose: weights, init, shuffling, ...). The same
    (seed, tags) always yields the same value stream.
    """
    entropy = [int(seed)] + [int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity u.v / (|u| |v|), clipped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"cosine_sim: shape mismatch, u {u.shape} vs v {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0:
        raise ValueError("cosine_sim: argument 'u' has zero norm")
    if nv == 0.0:
        raise ValueError("cosine_sim: argument 'v' has zero norm")
    return float(np.clip(float(np.dot(u, v)) / (nu * nv), -1.0, 1.0))


def cosine_matrix(rows: np.ndarray, text_rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between feature rows and text rows.

    Args:
        rows: (..., d) feature vectors.
        text_rows: (m, d) text feature vectors.

    Returns:
        (..., m) array of cosine similarities.
    """
    rows = np.asarray(rows, dtype=np.float64)
    text_rows = np.asarray(text_rows, dtype=np.float64)
    rn = np.linalg.norm(rows, axis=-1, keepdims=True)
    tn = np.linalg.norm(text_rows, axis=-1)
    if np.any(rn == 0.0):
        raise ValueError("cosine_matrix: a feature row has zero norm")
    if np.any(tn == 0.0):
        bad = int(np.argmin(tn))
        raise ValueError(f"cosine_matrix: text feature {bad} has zero norm")
    return (rows / rn) @ (text_rows / tn[:, None]).T


def softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, computed with a max shift."""
    if tau <= 0:
        raise ValueError(f"softmax: tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_sum_exp(logits: np.ndarray, tau: float = 1.0) -> float:
    """tau * log(sum_i exp(z_i / tau)), max-shifted against overflow.

    A single-entry input returns z_0 exactly.
    """
    if tau <= 0:
        raise ValueError(f"log_sum_exp: tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("log_sum_exp: empty input")
    if z.size == 1:
        return float(z[0])
    zs = z / tau
    m = float(np.max(zs))
    return float(tau * (m + np.log(np.sum(np.exp(zs - m)))))


def safe_log(p: np.ndarray) -> np.ndarray:
    """Natural log with inputs clamped to PROB_FLOOR."""
    return np.log(np.maximum(p, PROB_FLOOR))


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Rows scaled to unit L2 norm; zero rows are an error."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("l2_normalize: zero-norm input")
    return x / n


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    Works on arrays of any shape; the result has the shape of x.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_grad = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}"
            )
        flat_grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise gap scaled by the largest magnitude present.

    The absolute floor keeps all-zero gradient pairs comparing equal instead
    of dividing by zero.
    """
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"max_rel_error: shape mismatch {a.shape} vs {b.shape}")
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b)) / scale)
