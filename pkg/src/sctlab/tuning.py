"""Probability model, training objectives, and the prompt-tuning loop.

Three objectives share one implementation:

* ``coop``:   mean cross-entropy on the global features.
* ``locoop``: cross-entropy plus ``lam`` times an OOD regularizer averaged
  over rank-extracted local regions.
* ``sct``:    the same two terms, each multiplied by a confidence-dependent
  modulation factor (phi for the CE term, psi for the regularizer).

Gradients with respect to the prompt vectors are exact closed forms, chained
through token mean-pooling, the frozen linear text map, normalization, cosine
similarity, softmax, and the modulation factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import Encoders, FeatureMap, text_features_raw
from .numerics import PROB_FLOOR, cosine_matrix, make_rng, safe_log, softmax

LOSS_KINDS = ("coop", "locoop", "sct")
MODULATION_KINDS = ("none", "linear", "power", "logarithmic", "trigonometric")
REGULARIZER_KINDS = ("neg_entropy", "uniform_ce", "energy")

# substream tags for train()
_TAG_PROMPT_INIT = 21
_TAG_SHUFFLE = 22

PROMPT_INIT_SCALE = 0.02


class TrainingDivergence(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class Modulation:
    """Confidence-dependent loss weighting: phi scales CE, psi scales the
    OOD term. All kinds satisfy phi(0)=1, phi(1)=0, psi(0)=0, psi(1)=1."""

    kind: str = "none"
    alpha: float = 1.0  # power exponent, used only by kind == "power"

    def __post_init__(self):
        if self.kind not in MODULATION_KINDS:
            raise ValueError(f"Modulation.kind must be one of {MODULATION_KINDS}, got {self.kind!r}")
        if self.kind == "power" and not self.alpha > 0:
            raise ValueError(f"Modulation: power requires alpha > 0, got {self.alpha}")


@dataclass(frozen=True)
class Regularizer:
    """OOD regularizer applied to extracted regions.

    The energy kind is a one-sided hinge mean((max(0, m_out - E))^2) with
    E the negated log-sum-exp of the region logits, so minimizing it pushes
    region energies above m_out. m_in is accepted for interface parity with
    the two-sided energy loss but unused here: only surrogate-OOD regions
    are available in this pipeline.
    """

    kind: str = "neg_entropy"
    m_in: float = -5.0
    m_out: float = -3.0

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise ValueError(
                f"Regularizer.kind must be one of {REGULARIZER_KINDS}, got {self.kind!r}"
            )
        if self.kind == "energy" and not self.m_in < self.m_out:
            raise ValueError(
                f"Regularizer: energy requires m_in < m_out, got ({self.m_in}, {self.m_out})"
            )


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    rank_k: int | None = None  # None resolves to min(200, n_classes - 1)
    lr: float = 0.002
    epochs: int = 25
    batch_size: int = 32
    tau_train: float = 1.0
    n_tokens: int = 16
    modulation: Modulation = field(default_factory=Modulation)
    regularizer: Regularizer = field(default_factory=Regularizer)
    detach_modulation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"TrainConfig.lam must be >= 0, got {self.lam}")
        if self.rank_k is not None and self.rank_k < 0:
            raise ValueError(f"TrainConfig.rank_k must be >= 0, got {self.rank_k}")
        if not self.lr > 0:
            raise ValueError(f"TrainConfig.lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_tokens < 1:
            raise ValueError("TrainConfig: epochs, batch_size, n_tokens must be >= 1")
        if not self.tau_train > 0:
            raise ValueError(f"TrainConfig.tau_train must be > 0, got {self.tau_train}")


def resolve_rank_k(cfg: TrainConfig, n_classes: int) -> int:
    """Extraction rank cutoff; the desk-scale default caps 200 at M - 1."""
    if cfg.rank_k is not None:
        return cfg.rank_k
    return min(200, n_classes - 1)


@dataclass
class PromptContext:
    """The learnable context vectors; the only trainable parameters."""

    vectors: np.ndarray  # (n_tokens, d_emb)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("PromptContext: vectors must be (n_tokens >= 1, d_emb)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("PromptContext: non-finite entries")

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class EncodedExample:
    """A pre-encoded training example; features never depend on the prompt."""

    features: FeatureMap
    label: int


def _omega_array(omega) -> np.ndarray:
    if isinstance(omega, PromptContext):
        return omega.vectors
    return np.asarray(omega, dtype=np.float64)


# ---------------------------------------------------------------------------
# pointwise pieces


def class_probs(fm_global: np.ndarray, text_feats: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities: softmax over cosine(f, g_m) / tau."""
    sims = cosine_matrix(np.asarray(fm_global, dtype=np.float64), text_feats)
    return softmax(np.clip(sims, -1.0, 1.0), tau)


def ce_loss(p: np.ndarray, y: int) -> float:
    """Cross-entropy -log p_y with the probability clamped at PROB_FLOOR."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[-1]:
        raise ValueError(f"ce_loss: label {y} outside [0, {p.shape[-1]})")
    return float(-safe_log(p[y]))


def modulation_factors(mod: Modulation, p_y) -> tuple:
    """(phi, psi) at confidence p_y. Accepts scalars or arrays in [0, 1]."""
    p = np.asarray(p_y, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"modulation_factors: p_y must lie in [0, 1], got {p_y}")
    if mod.kind == "none":
        phi = np.ones_like(p)
        psi = np.ones_like(p)
    elif mod.kind == "linear":
        phi, psi = 1.0 - p, p
    elif mod.kind == "power":
        phi, psi = (1.0 - p) ** mod.alpha, p**mod.alpha
    elif mod.kind == "logarithmic":
        psi = np.log1p(p) / math.log(2.0)
        phi = 1.0 - psi
    else:  # trigonometric; sin keeps both boundary values exact
        phi = np.sin(0.5 * math.pi * (1.0 - p))
        psi = np.sin(0.5 * math.pi * p)
    if np.isscalar(p_y) or np.ndim(p_y) == 0:
        return float(phi), float(psi)
    return phi, psi


def modulation_slopes(mod: Modulation, p_y) -> tuple:
    """(dphi/dp, dpsi/dp) at confidence p_y; used by the analytic gradient."""
    p = np.asarray(p_y, dtype=np.float64)
    if mod.kind == "none":
        dphi = np.zeros_like(p)
        dpsi = np.zeros_like(p)
    elif mod.kind == "linear":
        dphi = np.full_like(p, -1.0)
        dpsi = np.ones_like(p)
    elif mod.kind == "power":
        a = mod.alpha
        dphi = -a * (1.0 - p) ** (a - 1.0)
        dpsi = a * p ** (a - 1.0)
    elif mod.kind == "logarithmic":
        dpsi = 1.0 / ((1.0 + p) * math.log(2.0))
        dphi = -dpsi
    else:  # trigonometric
        dphi = -0.5 * math.pi * np.cos(0.5 * math.pi * (1.0 - p))
        dpsi = 0.5 * math.pi * np.cos(0.5 * math.pi * p)
    if np.isscalar(p_y) or np.ndim(p_y) == 0:
        return float(dphi), float(dpsi)
    return dphi, dpsi


def modulation(mod: Modulation, p_y: float) -> tuple[float, float]:
    """Scalar alias for modulation_factors."""
    phi, psi = modulation_factors(mod, float(p_y))
    return phi, psi


def ood_reg(
    region_probs: np.ndarray | Sequence[np.ndarray],
    reg: Regularizer,
    region_logits: np.ndarray | None = None,
) -> float:
    """OOD regularizer averaged over the given regions.

    * neg_entropy: mean over regions of sum_m p log p.
    * uniform_ce: mean over regions of -(1/m) sum_m log p.
    * energy: mean over regions of max(0, m_out - E)^2 where E is the
      negated log-sum-exp of the region logits; this needs the logits
      themselves since probabilities lose the additive offset.
    """
    probs = np.asarray(region_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("ood_reg: empty region list; callers must skip the term")
    probs = np.atleast_2d(probs)
    if reg.kind == "neg_entropy":
        return float(np.mean((probs * safe_log(probs)).sum(axis=1)))
    if reg.kind == "uniform_ce":
        return float(np.mean(-safe_log(probs).mean(axis=1)))
    # energy
    if region_logits is None:
        raise ValueError("ood_reg: the energy regularizer requires region_logits")
    z = np.atleast_2d(np.asarray(region_logits, dtype=np.float64))
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    energy = -lse
    hinge = np.maximum(0.0, reg.m_out - energy)
    return float(np.mean(hinge**2))


# ---------------------------------------------------------------------------
# batched forward / backward


def _region_term_and_adjoint(
    q: np.ndarray, zl: np.ndarray, reg: Regularizer, want_grad: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-region regularizer values r (n, R) and, optionally, dr/dlogits.

    q is softmax(zl) along the last axis. The adjoint of a softmax-composed
    scalar with dr/dq = g is q * (g - sum_m q_m g_m).
    """
    if reg.kind == "neg_entropy":
        logq = safe_log(q)
        r = (q * logq).sum(axis=-1)
        if not want_grad:
            return r, None
        g = logq + (q > PROB_FLOOR)  # d(q log max(q, floor))/dq
        dz = q * (g - (q * g).sum(axis=-1, keepdims=True))
        return r, dz
    if reg.kind == "uniform_ce":
        m = q.shape[-1]
        r = -safe_log(q).mean(axis=-1)
        if not want_grad:
            return r, None
        g = np.where(q > PROB_FLOOR, -1.0 / (m * np.maximum(q, PROB_FLOOR)), 0.0)
        dz = q * (g - (q * g).sum(axis=-1, keepdims=True))
        return r, dz
    # energy hinge
    zmax = zl.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(zl - zmax).sum(axis=-1))
    hinge = np.maximum(0.0, reg.m_out + lse)  # m_out - E with E = -lse
    r = hinge**2
    if not want_grad:
        return r, None
    dz = 2.0 * hinge[..., None] * q  # d(lse)/dz = softmax(zl) = q
    return r, dz


def _batch_objective(
    batch: Sequence[EncodedExample],
    omega: np.ndarray,
    encoders: Encoders,
    cfg: TrainConfig,
    kind: str,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Mean loss over the batch and, optionally, its gradient w.r.t. omega."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    omega = np.asarray(omega, dtype=np.float64)
    n = len(batch)
    m = encoders.vocab.n_classes
    tau = cfg.tau_train
    k = resolve_rank_k(cfg, m)
    n_tok = omega.shape[0]
    labels = np.array([ex.label for ex in batch], dtype=np.intp)
    if np.any(labels < 0) or np.any(labels >= m):
        raise ValueError("batch contains a label outside the class range")

    # text side: pooled tokens -> frozen linear map -> (implicit) normalization
    h = text_features_raw(omega, encoders.vocab, encoders.text)  # (m, d_feat)
    hn = np.linalg.norm(h, axis=1)
    if np.any(hn == 0.0) or not (np.all(np.isfinite(h)) and np.all(np.isfinite(hn))):
        raise FloatingPointError("non-finite or zero-norm text features")
    ghat = h / hn[:, None]

    vg = np.stack([ex.features.global_feat for ex in batch])  # (n, d_feat), unit
    vl = np.stack([ex.features.local_feats for ex in batch])  # (n, R, d_feat), unit

    sims_g = vg @ ghat.T  # cosine similarities (features are unit norm)
    sims_l = vl @ ghat.T
    z = sims_g / tau
    zl = sims_l / tau
    p = softmax(z)
    q = softmax(zl)
    p_y = p[np.arange(n), labels]
    ce = -safe_log(p_y)

    # rank-based region extraction with the current prompt; same tie rule as
    # extraction.label_ranks (equal probability at a lower index outranks y)
    qy = np.take_along_axis(q, labels[:, None, None], axis=2)
    greater = (q > qy).sum(axis=2)
    class_idx = np.arange(m)[None, None, :]
    tied_lower = ((q == qy) & (class_idx < labels[:, None, None])).sum(axis=2)
    ranks = 1 + greater + tied_lower
    selected = ranks > k  # (n, R)
    n_sel = selected.sum(axis=1)

    use_reg = kind in ("locoop", "sct") and cfg.lam > 0
    r_regions, dr_dz = (None, None)
    reg_vals = np.zeros(n)
    if use_reg:
        r_regions, dr_dz = _region_term_and_adjoint(q, zl, cfg.regularizer, want_grad)
        reg_vals = np.where(
            n_sel > 0,
            (r_regions * selected).sum(axis=1) / np.maximum(n_sel, 1),
            0.0,
        )

    if kind == "sct":
        phi, psi = modulation_factors(cfg.modulation, p_y)
        losses = ce * phi + cfg.lam * reg_vals * psi
    elif kind == "locoop":
        phi = np.ones(n)
        psi = np.ones(n)
        losses = ce + cfg.lam * reg_vals
    else:  # coop
        phi = np.ones(n)
        psi = np.ones(n)
        losses = ce
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss value")
    if not want_grad:
        return loss, None

    # adjoint of the global logits: CE path plus the modulation path
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    ce_scale = phi if kind == "sct" else np.ones(n)
    adj_g = ce_scale[:, None] * (p - onehot)
    if kind == "sct" and not cfg.detach_modulation:
        dphi, dpsi = modulation_slopes(cfg.modulation, p_y)
        coef = ce * dphi + cfg.lam * reg_vals * dpsi  # dL/dp_y
        adj_g += (coef * p_y)[:, None] * (onehot - p)
    adj_g /= n

    # adjoint of the region logits: lam * psi * mean over selected regions
    t1 = adj_g.T @ vg  # (m, d_feat) accumulator of a_row * v_row
    t2 = (adj_g * sims_g).sum(axis=0)  # (m,) accumulator of a_row * cos_row
    if use_reg and np.any(n_sel > 0):
        reg_scale = cfg.lam * psi / (np.maximum(n_sel, 1) * n)
        adj_l = dr_dz * (reg_scale[:, None] * selected)[:, :, None]
        t1 += np.einsum("nrm,nrd->md", adj_l, vl)
        t2 += (adj_l * sims_l).sum(axis=(0, 1))

    # pull back through cosine (dz/dh = (vhat - cos * ghat) / (|h| tau)),
    # the linear map, and the token mean
    grad_h = (t1 - t2[:, None] * ghat) / (hn[:, None] * tau)
    grad_pooled = grad_h @ encoders.text.weight.T  # (m, d_emb)
    grad_token = grad_pooled.sum(axis=0) / (n_tok + 1)
    grad = np.tile(grad_token, (n_tok, 1))
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite prompt gradient")
    return loss, grad


def batch_loss(kind: str, batch, omega, encoders: Encoders, cfg: TrainConfig) -> float:
    """Mean loss of the selected objective over the batch."""
    loss, _ = _batch_objective(batch, _omega_array(omega), encoders, cfg, kind, False)
    return loss


def loss_locoop(batch, omega, encoders: Encoders, cfg: TrainConfig) -> float:
    """CE plus lam times the region regularizer, averaged over the batch."""
    return batch_loss("locoop", batch, omega, encoders, cfg)


def loss_sct(batch, omega, encoders: Encoders, cfg: TrainConfig) -> float:
    """Modulated objective: CE * phi(p_y) + lam * reg * psi(p_y), batch mean."""
    return batch_loss("sct", batch, omega, encoders, cfg)


def grad_prompt(kind: str, batch, omega, encoders: Encoders, cfg: TrainConfig) -> np.ndarray:
    """Exact gradient of the selected loss with respect to every prompt entry."""
    _, grad = _batch_objective(batch, _omega_array(omega), encoders, cfg, kind, True)
    return grad


# ---------------------------------------------------------------------------
# training loop


def init_prompt(cfg: TrainConfig, d_emb: int) -> PromptContext:
    """Gaussian prompt initialization with scale PROMPT_INIT_SCALE."""
    rng = make_rng(cfg.seed, _TAG_PROMPT_INIT)
    return PromptContext(rng.normal(0.0, PROMPT_INIT_SCALE, size=(cfg.n_tokens, d_emb)))


def train(
    dataset: Sequence[EncodedExample],
    encoders: Encoders,
    cfg: TrainConfig,
    loss_kind: str = "sct",
) -> tuple[PromptContext, list[float]]:
    """Plain shuffled mini-batch SGD on the prompt vectors.

    Fixed learning rate, no momentum, no weight decay, so a single step is
    exactly omega - lr * grad. Returns the tuned prompt and the per-epoch
    mean loss trace. Deterministic given cfg.seed.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    m = encoders.vocab.n_classes
    present = {ex.label for ex in dataset}
    missing = sorted(set(range(m)) - present)
    if missing:
        raise ValueError(f"train: no examples for classes {missing}")

    d_emb = encoders.text.weight.shape[0]
    omega = init_prompt(cfg, d_emb).vectors
    shuffle_rng = make_rng(cfg.seed, _TAG_SHUFFLE)
    n = len(dataset)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        running = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [dataset[i] for i in idx]
            try:
                loss, grad = _batch_objective(batch, omega, encoders, cfg, loss_kind, True)
            except FloatingPointError as err:
                raise TrainingDivergence(epoch, step) from err
            omega = omega - cfg.lr * grad
            if not np.all(np.isfinite(omega)):
                raise TrainingDivergence(epoch, step)
            running += loss * len(batch)
        trace.append(running / n)
    return PromptContext(omega), trace


# ---------------------------------------------------------------------------
# serialization


def prompt_to_json_dict(
    prompt: PromptContext, cfg: TrainConfig, loss_trace: Sequence[float]
) -> dict:
    return {
        "n_tokens": prompt.n_tokens,
        "dim": prompt.dim,
        "vectors": prompt.vectors.tolist(),
        "train_config": train_config_to_dict(cfg),
        "seed": cfg.seed,
        "loss_trace": list(map(float, loss_trace)),
    }


def prompt_from_json_dict(doc: dict) -> tuple[PromptContext, TrainConfig, list[float]]:
    prompt = PromptContext(np.array(doc["vectors"], dtype=np.float64))
    cfg = train_config_from_dict(doc["train_config"])
    return prompt, cfg, list(doc["loss_trace"])


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "lam": cfg.lam,
        "rank_k": cfg.rank_k,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "tau_train": cfg.tau_train,
        "n_tokens": cfg.n_tokens,
        "modulation": {"kind": cfg.modulation.kind, "alpha": cfg.modulation.alpha},
        "regularizer": {
            "kind": cfg.regularizer.kind,
            "m_in": cfg.regularizer.m_in,
            "m_out": cfg.regularizer.m_out,
        },
        "detach_modulation": cfg.detach_modulation,
        "seed": cfg.seed,
    }


def train_config_from_dict(doc: dict) -> TrainConfig:
    mod = doc.get("modulation", {})
    reg = doc.get("regularizer", {})
    return TrainConfig(
        lam=float(doc.get("lam", 0.2)),
        rank_k=None if doc.get("rank_k") is None else int(doc["rank_k"]),
        lr=float(doc.get("lr", 0.002)),
        epochs=int(doc.get("epochs", 25)),
        batch_size=int(doc.get("batch_size", 32)),
        tau_train=float(doc.get("tau_train", 1.0)),
        n_tokens=int(doc.get("n_tokens", 16)),
        modulation=Modulation(
            kind=mod.get("kind", "none"), alpha=float(mod.get("alpha", 1.0))
        ),
        regularizer=Regularizer(
            kind=reg.get("kind", "neg_entropy"),
            m_in=float(reg.get("m_in", -5.0)),
            m_out=float(reg.get("m_out", -3.0)),
        ),
        detach_modulation=bool(doc.get("detach_modulation", False)),
        seed=int(doc.get("seed", 0)),
    )
