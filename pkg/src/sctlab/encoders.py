"""Frozen toy encoders standing in for a vision-language backbone.

Both encoders are seeded linear maps, fixed at construction time. The image
encoder turns an H x W grid of patch latents into unit-norm local features
plus a pooled global feature; the text encoder turns prompt tokens plus a
class embedding into a unit-norm text feature, differentiably in the prompt.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import l2_normalize, make_rng

# substream tags for build_encoders
_TAG_IMAGE_W = 11
_TAG_TEXT_W = 12
_TAG_CLASS_EMB = 13


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EncoderDims:
    """Shape bundle for one encoder world."""

    d_lat: int = 16
    d_emb: int = 16
    d_feat: int = 32
    grid_h: int = 4
    grid_w: int = 4
    n_classes: int = 20

    def __post_init__(self):
        for name in ("d_lat", "d_emb", "d_feat", "grid_h", "grid_w", "n_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"EncoderDims.{name} must be a positive integer, got {v!r}")
        if self.n_classes < 2:
            raise ValueError(f"EncoderDims.n_classes must be >= 2, got {self.n_classes}")


@dataclass(frozen=True)
class ToyImageEncoder:
    weight: np.ndarray  # (d_lat, d_feat), frozen
    grid_h: int
    grid_w: int
    seed: int

    @property
    def n_regions(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class ToyTextEncoder:
    weight: np.ndarray  # (d_emb, d_feat), frozen
    seed: int


@dataclass(frozen=True)
class ClassVocabulary:
    class_embeddings: np.ndarray  # (m, d_emb), frozen
    class_names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]


@dataclass(frozen=True)
class Encoders:
    """The frozen (image encoder, text encoder, class vocabulary) triple."""

    image: ToyImageEncoder
    text: ToyTextEncoder
    vocab: ClassVocabulary


@dataclass(frozen=True)
class FeatureMap:
    """Unit-norm global feature plus the grid of unit-norm local features."""

    global_feat: np.ndarray  # (d_feat,)
    local_feats: np.ndarray  # (n_regions, d_feat)
    source_id: str = ""

    def __post_init__(self):
        gn = np.linalg.norm(self.global_feat)
        ln = np.linalg.norm(self.local_feats, axis=-1)
        if abs(gn - 1.0) > 1e-9 or np.any(np.abs(ln - 1.0) > 1e-9):
            raise ValueError("FeatureMap: features must be unit norm within 1e-9")

    @property
    def n_regions(self) -> int:
        return self.local_feats.shape[0]


def build_encoders(dims: EncoderDims, seed: int) -> Encoders:
    """Construct the frozen encoder triple from a single seed.

    Weights and class embeddings are i.i.d. zero-mean Gaussian with scale
    1/sqrt(input dim), which keeps cosine similarities between random
    features well spread in [-1, 1].
    """
    w_img = make_rng(seed, _TAG_IMAGE_W).normal(
        0.0, 1.0 / np.sqrt(dims.d_lat), size=(dims.d_lat, dims.d_feat)
    )
    w_txt = make_rng(seed, _TAG_TEXT_W).normal(
        0.0, 1.0 / np.sqrt(dims.d_emb), size=(dims.d_emb, dims.d_feat)
    )
    emb = make_rng(seed, _TAG_CLASS_EMB).normal(
        0.0, 1.0 / np.sqrt(dims.d_emb), size=(dims.n_classes, dims.d_emb)
    )
    names = tuple(f"class{m:03d}" for m in range(dims.n_classes))
    return Encoders(
        image=ToyImageEncoder(_frozen(w_img), dims.grid_h, dims.grid_w, int(seed)),
        text=ToyTextEncoder(_frozen(w_txt), int(seed)),
        vocab=ClassVocabulary(_frozen(emb), names),
    )


def encode_image(patches: np.ndarray, enc: ToyImageEncoder, source_id: str = "") -> FeatureMap:
    """Project a patch grid through the frozen linear map.

    Each local feature is the normalized projection of one patch latent; the
    global feature is the normalized mean of the pre-normalization local
    projections (mean pooling, so it is invariant to patch order).

    Args:
        patches: (grid_h, grid_w, d_lat) or (grid_h * grid_w, d_lat) latents.
        enc: frozen image encoder.
        source_id: opaque identifier carried through to the FeatureMap.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n_regions = enc.grid_h * enc.grid_w
    if patches.ndim == 3:
        patches = patches.reshape(-1, patches.shape[-1])
    if patches.shape != (n_regions, enc.weight.shape[0]):
        raise ValueError(
            f"encode_image: patches have shape {patches.shape}, encoder expects "
            f"({n_regions}, {enc.weight.shape[0]})"
        )
    proj = patches @ enc.weight  # (n_regions, d_feat), pre-normalization
    return FeatureMap(
        global_feat=l2_normalize(proj.mean(axis=0)),
        local_feats=l2_normalize(proj),
        source_id=source_id,
    )


def encode_text(omega: np.ndarray, class_embedding: np.ndarray, enc: ToyTextEncoder) -> np.ndarray:
    """Text feature for one class: normalize(W.T @ mean(omega_1..omega_n, c)).

    The mean over prompt tokens plus the class embedding is the simplest
    differentiable sequence summary; the gradient flows through the mean,
    the linear map, and the normalization.
    """
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    c = np.asarray(class_embedding, dtype=np.float64)
    if omega.shape[1] != c.shape[0] or c.shape[0] != enc.weight.shape[0]:
        raise ValueError(
            f"encode_text: token dim {omega.shape[1]}, class dim {c.shape[0]}, "
            f"encoder expects {enc.weight.shape[0]}"
        )
    pooled = (omega.sum(axis=0) + c) / (omega.shape[0] + 1)
    return l2_normalize(pooled @ enc.weight)


def text_features_raw(omega: np.ndarray, vocab: ClassVocabulary, enc: ToyTextEncoder) -> np.ndarray:
    """Pre-normalization text projections for every class, shape (m, d_feat)."""
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    if omega.shape[1] != enc.weight.shape[0]:
        raise ValueError(
            f"text_features_raw: token dim {omega.shape[1]}, encoder expects "
            f"{enc.weight.shape[0]}"
        )
    pooled = (omega.sum(axis=0)[None, :] + vocab.class_embeddings) / (omega.shape[0] + 1)
    return pooled @ enc.weight


def text_features(omega: np.ndarray, vocab: ClassVocabulary, enc: ToyTextEncoder) -> np.ndarray:
    """Unit-norm text features for every class, shape (m, d_feat)."""
    return l2_normalize(text_features_raw(omega, vocab, enc))


def weights_checksum(enc: Encoders) -> str:
    """SHA-256 over all frozen parameters; used to assert nothing mutates them."""
    h = hashlib.sha256()
    for arr in (enc.image.weight, enc.text.weight, enc.vocab.class_embeddings):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def encoders_to_json_dict(enc: Encoders) -> dict:
    """JSON document {dims, seed, weights as nested arrays} for replay."""
    return {
        "dims": {
            "d_lat": enc.image.weight.shape[0],
            "d_emb": enc.text.weight.shape[0],
            "d_feat": enc.text.weight.shape[1],
            "grid_h": enc.image.grid_h,
            "grid_w": enc.image.grid_w,
            "n_classes": enc.vocab.n_classes,
        },
        "seed": enc.image.seed,
        "image_weight": enc.image.weight.tolist(),
        "text_weight": enc.text.weight.tolist(),
        "class_embeddings": enc.vocab.class_embeddings.tolist(),
        "class_names": list(enc.vocab.class_names),
    }


def encoders_from_json_dict(doc: dict) -> Encoders:
    dims = doc["dims"]
    return Encoders(
        image=ToyImageEncoder(
            _frozen(np.array(doc["image_weight"])),
            int(dims["grid_h"]),
            int(dims["grid_w"]),
            int(doc["seed"]),
        ),
        text=ToyTextEncoder(_frozen(np.array(doc["text_weight"])), int(doc["seed"])),
        vocab=ClassVocabulary(
            _frozen(np.array(doc["class_embeddings"])), tuple(doc["class_names"])
        ),
    )


def save_encoders(path: str | Path, enc: Encoders) -> None:
    Path(path).write_text(json.dumps(encoders_to_json_dict(enc), sort_keys=True))


def load_encoders(path: str | Path) -> Encoders:
    return encoders_from_json_dict(json.loads(Path(path).read_text()))
