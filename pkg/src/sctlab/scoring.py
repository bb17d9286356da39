"""Post-hoc OOD detectors over feature maps and text features.

Every score follows a single convention: higher means more in-distribution.
Detectors whose original definition is an anomaly score (energy, max-logit)
are returned negated so that downstream FPR/AUROC code never branches per
detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import FeatureMap, ToyImageEncoder, encode_image
from .numerics import cosine_matrix, log_sum_exp, softmax

DETECTOR_KINDS = ("msp", "odin", "energy", "react", "maxlogit", "mcm", "glmcm")


@dataclass(frozen=True)
class DetectorConfig:
    """One detector plus its hyperparameters (unused fields are ignored).

    temperature: softmax/energy temperature T (odin, energy).
    eps: odin input-perturbation magnitude; 0 disables the perturbation.
    c_percentile: react clipping percentile over pooled ID activations.
    tau: mcm / glmcm softmax temperature.
    """

    kind: str
    temperature: float = 1.0
    eps: float = 0.0
    c_percentile: float = 90.0
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"DetectorConfig.kind must be one of {DETECTOR_KINDS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError(f"DetectorConfig.temperature must be > 0, got {self.temperature}")
        if self.eps < 0:
            raise ValueError(f"DetectorConfig.eps must be >= 0, got {self.eps}")
        if not 0 < self.c_percentile <= 100:
            raise ValueError(
                f"DetectorConfig.c_percentile must lie in (0, 100], got {self.c_percentile}"
            )
        if not self.tau > 0:
            raise ValueError(f"DetectorConfig.tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class DecisionRule:
    """Threshold rule: a sample is called ID when its score is >= mu."""

    mu: float

    def __post_init__(self):
        if np.isnan(self.mu):
            raise ValueError("DecisionRule.mu must not be NaN")


def default_detectors() -> list[DetectorConfig]:
    """The standard detector battery. ODIN defaults to T=1000 and eps=0."""
    return [
        DetectorConfig("mcm", tau=1.0),
        DetectorConfig("glmcm", tau=1.0),
        DetectorConfig("msp"),
        DetectorConfig("maxlogit"),
        DetectorConfig("energy", temperature=1.0),
        DetectorConfig("react", c_percentile=90.0),
        DetectorConfig("odin", temperature=1000.0, eps=0.0),
    ]


def logits(fm_global: np.ndarray, text_feats: np.ndarray, tau: float) -> np.ndarray:
    """Shared front end: cosine similarities scaled by 1/tau."""
    if not tau > 0:
        raise ValueError(f"logits: tau must be > 0, got {tau}")
    return cosine_matrix(np.asarray(fm_global, dtype=np.float64), text_feats) / tau


def score_msp(fm: FeatureMap, text_feats: np.ndarray, cfg: DetectorConfig | None = None) -> float:
    """Maximum softmax probability of the global logits at temperature 1."""
    return float(np.max(softmax(logits(fm.global_feat, text_feats, 1.0))))


def score_maxlogit(fm: FeatureMap, text_feats: np.ndarray, cfg: DetectorConfig | None = None) -> float:
    """Largest global logit (sign flipped from the anomaly-score convention)."""
    return float(np.max(logits(fm.global_feat, text_feats, 1.0)))


def score_energy(fm: FeatureMap, text_feats: np.ndarray, cfg: DetectorConfig) -> float:
    """Negated energy T log sum exp(z / T); higher means more ID."""
    return log_sum_exp(logits(fm.global_feat, text_feats, 1.0), cfg.temperature)


def score_mcm(fm: FeatureMap, text_feats: np.ndarray, cfg: DetectorConfig) -> float:
    """Maximum softmax of cosine similarities at the configured temperature."""
    return float(np.max(softmax(logits(fm.global_feat, text_feats, cfg.tau))))


def score_glmcm(fm: FeatureMap, text_feats: np.ndarray, cfg: DetectorConfig) -> float:
    """Global max-softmax plus the best per-region max-softmax."""
    if fm.local_feats.shape[0] < 1:
        raise ValueError("score_glmcm: feature map has no local regions")
    global_term = float(np.max(softmax(logits(fm.global_feat, text_feats, cfg.tau))))
    local_probs = softmax(cosine_matrix(fm.local_feats, text_feats) / cfg.tau)
    return global_term + float(np.max(local_probs))


def score_react(
    fm: FeatureMap,
    text_feats: np.ndarray,
    cfg: DetectorConfig,
    calibration_features: np.ndarray,
) -> float:
    """Energy score after clipping activations at an ID percentile.

    The clip level c is the cfg.c_percentile percentile of the calibration
    features with all coordinates pooled together; the clipped feature is
    re-normalized before scoring.
    """
    calib = np.asarray(calibration_features, dtype=np.float64)
    if calib.size == 0:
        raise ValueError("score_react: empty calibration feature set")
    c = float(np.percentile(calib.reshape(-1), cfg.c_percentile))
    clipped = np.minimum(fm.global_feat, c)
    norm = float(np.linalg.norm(clipped))
    if norm == 0.0:
        raise ValueError("score_react: clipped feature has zero norm")
    return log_sum_exp(logits(clipped / norm, text_feats, 1.0), 1.0)


def odin_input_gradient(
    patches: np.ndarray,
    text_feats: np.ndarray,
    temperature: float,
    enc: ToyImageEncoder,
) -> np.ndarray:
    """Gradient of log max-softmax(z / T) with respect to the patch latents.

    The global feature is the normalized mean of the linear patch
    projections, so every patch receives the same gradient.
    """
    patches = np.asarray(patches, dtype=np.float64).reshape(-1, enc.weight.shape[0])
    n_regions = patches.shape[0]
    g = np.asarray(text_feats, dtype=np.float64)
    ghat = g / np.linalg.norm(g, axis=1, keepdims=True)

    h = patches @ enc.weight
    pooled = h.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise ValueError("odin_input_gradient: pooled feature has zero norm")
    phat = pooled / norm
    sims = ghat @ phat  # (m,) cosines
    qprob = softmax(sims / temperature)
    top = int(np.argmax(sims))

    # d log softmax(z/T)_top / dz = (onehot - q) / T, then through the cosine
    dz = (np.eye(len(sims))[top] - qprob) / temperature
    grad_pooled = (dz[:, None] * (ghat - sims[:, None] * phat[None, :])).sum(axis=0) / norm
    grad_patch = (enc.weight @ grad_pooled) / n_regions
    grad = np.tile(grad_patch, (n_regions, 1))
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("odin_input_gradient: non-finite gradient")
    return grad


def score_odin(
    patches: np.ndarray,
    fm: FeatureMap,
    text_feats: np.ndarray,
    cfg: DetectorConfig,
    enc: ToyImageEncoder,
) -> float:
    """Temperature-scaled MSP after an optional confidence-raising input nudge.

    With eps > 0 the patch latents are shifted against the sign of the
    negative log-softmax gradient (the classic perturbation), re-encoded,
    and rescored; with eps = 0 this is plain temperature-scaled MSP.
    """
    if cfg.eps > 0:
        grad = odin_input_gradient(patches, text_feats, cfg.temperature, enc)
        perturbed = np.asarray(patches, dtype=np.float64).reshape(grad.shape) + cfg.eps * np.sign(grad)
        fm = encode_image(perturbed, enc, source_id=fm.source_id)
    z = logits(fm.global_feat, text_feats, 1.0)
    return float(np.max(softmax(z, cfg.temperature)))


def decide(score: float, rule: DecisionRule) -> str:
    """Threshold decision: 'ID' when score >= mu, else 'OOD'."""
    return "ID" if score >= rule.mu else "OOD"
