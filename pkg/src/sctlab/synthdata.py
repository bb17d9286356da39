"""Seeded synthetic patch-grid datasets.

Each ID example mixes foreground patches (its class prototype plus Gaussian
jitter) with background patches drawn from a shared background pool; the
fg_fraction dial controls how much of the grid is class-relevant, which is
the controllable source of spurious extracted regions. OOD examples draw
every patch from a disjoint prototype pool and carry an all-false foreground
mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import Encoders, encode_image
from .numerics import make_rng
from .tuning import EncodedExample, class_probs

OOD_LABEL = -1

# substream tags
_TAG_CLASS_PROTO = 31
_TAG_BG_PROTO = 32
_TAG_OOD_PROTO = 33
_TAG_ID_EXAMPLES = 34
_TAG_OOD_EXAMPLES = 35


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 20
    n_background: int = 10
    grid_h: int = 4
    grid_w: int = 4
    latent_dim: int = 16
    class_sep: float = 3.0  # expected distance between class prototypes
    noise: float = 0.7  # per-patch Gaussian jitter sigma
    fg_fraction: float = 0.6  # fraction of patches drawn from the class prototype
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"SynthConfig.n_classes must be >= 2, got {self.n_classes}")
        if self.n_background < 1:
            raise ValueError(f"SynthConfig.n_background must be >= 1, got {self.n_background}")
        if self.grid_h < 1 or self.grid_w < 1 or self.latent_dim < 1:
            raise ValueError("SynthConfig: grid and latent_dim must be positive")
        if not self.class_sep > 0:
            raise ValueError(f"SynthConfig.class_sep must be > 0, got {self.class_sep}")
        if self.noise < 0:
            raise ValueError(f"SynthConfig.noise must be >= 0, got {self.noise}")
        if not 0 < self.fg_fraction <= 1:
            raise ValueError(f"SynthConfig.fg_fraction must lie in (0, 1], got {self.fg_fraction}")

    @property
    def n_regions(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class SynthExample:
    patches: np.ndarray  # (n_regions, latent_dim)
    label: int  # class index, or OOD_LABEL
    fg_mask: np.ndarray  # (n_regions,) bool, true where the class prototype was used
    example_id: str = ""


def _prototype_scale(cfg: SynthConfig) -> float:
    # i.i.d. N(0, s^2 I) prototypes have expected pairwise distance
    # sqrt(2 d) * s; solve for s so that distance ~= class_sep
    return cfg.class_sep / np.sqrt(2.0 * cfg.latent_dim)


def class_prototypes(cfg: SynthConfig) -> np.ndarray:
    return make_rng(cfg.seed, _TAG_CLASS_PROTO).normal(
        0.0, _prototype_scale(cfg), size=(cfg.n_classes, cfg.latent_dim)
    )


def background_prototypes(cfg: SynthConfig) -> np.ndarray:
    return make_rng(cfg.seed, _TAG_BG_PROTO).normal(
        0.0, _prototype_scale(cfg), size=(cfg.n_background, cfg.latent_dim)
    )


def ood_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Prototype pool for OOD examples, from a stream disjoint from both the
    class and background pools (same size as the background pool)."""
    return make_rng(cfg.seed, _TAG_OOD_PROTO).normal(
        0.0, _prototype_scale(cfg), size=(cfg.n_background, cfg.latent_dim)
    )


def n_foreground(cfg: SynthConfig) -> int:
    """Foreground patches per ID example; at least one so every ID example
    carries some class signal even at tiny fg_fraction."""
    return max(1, round(cfg.fg_fraction * cfg.n_regions))


def gen_id(cfg: SynthConfig, shots: int, split_seed: int) -> list[SynthExample]:
    """Exactly `shots` examples per class, deterministically from the seeds."""
    if shots < 1:
        raise ValueError(f"gen_id: shots must be >= 1, got {shots}")
    protos = class_prototypes(cfg)
    bg = background_prototypes(cfg)
    rng = make_rng(cfg.seed, _TAG_ID_EXAMPLES, split_seed)
    r = cfg.n_regions
    n_fg = n_foreground(cfg)
    out: list[SynthExample] = []
    for m in range(cfg.n_classes):
        for s in range(shots):
            bg_pick = rng.integers(0, cfg.n_background, size=r - n_fg)
            jitter = rng.normal(0.0, cfg.noise, size=(r, cfg.latent_dim))
            pos = rng.permutation(r)
            patches = np.empty((r, cfg.latent_dim))
            fg_mask = np.zeros(r, dtype=bool)
            patches[pos[:n_fg]] = protos[m] + jitter[:n_fg]
            fg_mask[pos[:n_fg]] = True
            patches[pos[n_fg:]] = bg[bg_pick] + jitter[n_fg:]
            out.append(
                SynthExample(patches, m, fg_mask, f"id-s{split_seed}-c{m:03d}-{s:03d}")
            )
    return out


def gen_ood(cfg: SynthConfig, n: int, ood_seed: int) -> list[SynthExample]:
    """n examples whose patches all come from the disjoint OOD prototype pool."""
    if n < 1:
        raise ValueError(f"gen_ood: n must be >= 1, got {n}")
    protos = ood_prototypes(cfg)
    rng = make_rng(cfg.seed, _TAG_OOD_EXAMPLES, ood_seed)
    r = cfg.n_regions
    out: list[SynthExample] = []
    for i in range(n):
        pick = rng.integers(0, protos.shape[0], size=r)
        jitter = rng.normal(0.0, cfg.noise, size=(r, cfg.latent_dim))
        patches = protos[pick] + jitter
        out.append(
            SynthExample(patches, OOD_LABEL, np.zeros(r, dtype=bool), f"ood-s{ood_seed}-{i:05d}")
        )
    return out


def encode_examples(examples: Sequence[SynthExample], enc: Encoders) -> list[EncodedExample]:
    """Run every example through the frozen image encoder once."""
    return [
        EncodedExample(encode_image(ex.patches, enc.image, ex.example_id), ex.label)
        for ex in examples
    ]


def uncertainty_cohorts(
    pool: Sequence[SynthExample],
    model: tuple,
    shots_per_cohort: int,
) -> tuple[list[SynthExample], list[SynthExample]]:
    """Split a labeled pool into confidence extremes, per class.

    Uncertainty of an example is measured by the model's predicted
    probability for its ground-truth label: for each class, the
    shots_per_cohort highest-probability examples form the low-uncertainty
    cohort and the lowest form the high-uncertainty cohort.

    Args:
        pool: labeled ID examples, at least 2 * shots_per_cohort per class.
        model: (omega, encoders, tau) triple of a trained prompt.
    """
    omega, encoders, tau = model
    from .encoders import text_features  # deferred to keep import order flat
    from .tuning import _omega_array

    if shots_per_cohort < 1:
        raise ValueError("uncertainty_cohorts: shots_per_cohort must be >= 1")
    text = text_features(_omega_array(omega), encoders.vocab, encoders.text)
    by_class: dict[int, list[tuple[float, int]]] = {}
    for i, ex in enumerate(pool):
        fm = encode_image(ex.patches, encoders.image, ex.example_id)
        p = class_probs(fm.global_feat, text, tau)
        by_class.setdefault(ex.label, []).append((float(p[ex.label]), i))

    low: list[SynthExample] = []
    high: list[SynthExample] = []
    for label in sorted(by_class):
        scored = by_class[label]
        if len(scored) < 2 * shots_per_cohort:
            raise ValueError(
                f"uncertainty_cohorts: class {label} has {len(scored)} pool examples, "
                f"needs at least {2 * shots_per_cohort}"
            )
        # stable descending sort; ties resolve by pool position
        order = sorted(range(len(scored)), key=lambda j: (-scored[j][0], scored[j][1]))
        low.extend(pool[scored[j][1]] for j in order[:shots_per_cohort])
        high.extend(pool[scored[j][1]] for j in order[-shots_per_cohort:])
    return low, high


# ---------------------------------------------------------------------------
# JSON Lines dataset files


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    return {
        "n_classes": cfg.n_classes,
        "n_background": cfg.n_background,
        "grid_h": cfg.grid_h,
        "grid_w": cfg.grid_w,
        "latent_dim": cfg.latent_dim,
        "class_sep": cfg.class_sep,
        "noise": cfg.noise,
        "fg_fraction": cfg.fg_fraction,
        "seed": cfg.seed,
    }


def synth_config_from_dict(doc: dict) -> SynthConfig:
    return SynthConfig(
        n_classes=int(doc["n_classes"]),
        n_background=int(doc["n_background"]),
        grid_h=int(doc["grid_h"]),
        grid_w=int(doc["grid_w"]),
        latent_dim=int(doc["latent_dim"]),
        class_sep=float(doc["class_sep"]),
        noise=float(doc["noise"]),
        fg_fraction=float(doc["fg_fraction"]),
        seed=int(doc["seed"]),
    )


def write_dataset(path: str | Path, cfg: SynthConfig, examples: Sequence[SynthExample]) -> None:
    """One JSON object per line, preceded by a header line with the config."""
    lines = [json.dumps({"format_version": 1, "synth_config": synth_config_to_dict(cfg)}, sort_keys=True)]
    for ex in examples:
        lines.append(
            json.dumps(
                {
                    "id": ex.example_id,
                    "label": ex.label,
                    "patches": ex.patches.tolist(),
                    "fg_mask": ex.fg_mask.tolist(),
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> tuple[SynthConfig, list[SynthExample]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"read_dataset: {path} is empty")
    header = json.loads(lines[0])
    if header.get("format_version") != 1:
        raise ValueError(f"read_dataset: unsupported format_version in {path}")
    cfg = synth_config_from_dict(header["synth_config"])
    examples = []
    for line in lines[1:]:
        doc = json.loads(line)
        examples.append(
            SynthExample(
                patches=np.array(doc["patches"], dtype=np.float64),
                label=int(doc["label"]),
                fg_mask=np.array(doc["fg_mask"], dtype=bool),
                example_id=str(doc["id"]),
            )
        )
    return cfg, examples
