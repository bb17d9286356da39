"""Experiment runner.

Subcommands: gen, train, eval, compare, cohort, gradcheck. Every run is
driven by a single declarative JSON config; emitted reports embed the fully
resolved config plus its hash, and rerunning any command with the same
config reproduces the output files byte for byte.

Exit codes: 0 success, 2 config or input error, 3 training divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoders import (
    EncoderDims,
    Encoders,
    build_encoders,
    encode_image,
    text_features,
)
from .metrics import auroc, ece, fpr_at_tpr, id_accuracy
from .numerics import finite_diff_grad, make_rng, max_rel_error
from .scoring import (
    DetectorConfig,
    score_energy,
    score_glmcm,
    score_maxlogit,
    score_mcm,
    score_msp,
    score_odin,
    score_react,
)
from .synthdata import (
    SynthConfig,
    SynthExample,
    encode_examples,
    gen_id,
    gen_ood,
    read_dataset,
    synth_config_from_dict,
    synth_config_to_dict,
    uncertainty_cohorts,
    write_dataset,
)
from .tuning import (
    Modulation,
    Regularizer,
    TrainConfig,
    TrainingDivergence,
    batch_loss,
    class_probs,
    grad_prompt,
    init_prompt,
    prompt_from_json_dict,
    prompt_to_json_dict,
    resolve_rank_k,
    train,
    train_config_from_dict,
    train_config_to_dict,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

METHODS = ("coop", "locoop", "sct")
GRADCHECK_TOL = 1e-4


class ConfigError(ValueError):
    """Config problem annotated with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config error at {path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EvalSettings:
    n_id_test: int = 200
    n_ood_test: int = 500
    ece_bins: int = 15

    def __post_init__(self):
        if self.n_id_test < 1 or self.n_ood_test < 1 or self.ece_bins < 1:
            raise ValueError("eval settings must be positive")


@dataclass(frozen=True)
class DataSettings:
    """Dataset split seeds and sizes (artifact plumbing, not model knobs)."""

    shots: int = 16
    train_seed: int = 101
    test_seed: int = 202
    ood_seed: int = 303
    pool_shots: int = 32  # cohort experiment: pool size per class
    probe_shots: int = 4  # cohort experiment: probe-model training shots
    probe_seed: int = 404  # split seed of the probe set, disjoint from the pool

    def __post_init__(self):
        if self.shots < 1 or self.pool_shots < 1 or self.probe_shots < 1:
            raise ValueError("shots values must be >= 1")
        if self.probe_seed == self.train_seed:
            raise ValueError("probe_seed must differ from train_seed (disjoint splits)")


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig
    encoder_dims: EncoderDims
    encoder_seed: int
    train: TrainConfig
    detectors: tuple[DetectorConfig, ...]
    eval: EvalSettings
    data: DataSettings
    output_dir: str


_SECTION_FIELDS = {
    "synth": (
        "n_classes", "n_background", "grid_h", "grid_w", "latent_dim",
        "class_sep", "noise", "fg_fraction", "seed",
    ),
    "encoders": ("d_lat", "d_emb", "d_feat", "grid_h", "grid_w", "n_classes", "seed"),
    "train": (
        "lam", "rank_k", "lr", "epochs", "batch_size", "tau_train", "n_tokens",
        "modulation", "regularizer", "detach_modulation", "seed",
    ),
    "eval": ("n_id_test", "n_ood_test", "ece_bins"),
    "data": (
        "shots", "train_seed", "test_seed", "ood_seed",
        "pool_shots", "probe_shots", "probe_seed",
    ),
}


def _check_keys(section: str, doc: dict) -> None:
    allowed = set(_SECTION_FIELDS[section])
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}", "unknown field")


def parse_config(doc: dict, out_override: str | None = None) -> ExperimentConfig:
    """Validate a config document; errors carry the offending field path."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    required = ["synth", "encoders", "train", "detectors", "eval", "data"]
    for name in required:
        if name not in doc:
            raise ConfigError(name, "missing required section")
    known_top = set(required) | {"output_dir"}
    for key in doc:
        if key not in known_top:
            raise ConfigError(key, "unknown section")

    _check_keys("synth", doc["synth"])
    try:
        synth = synth_config_from_dict({**synth_config_to_dict(SynthConfig()), **doc["synth"]})
    except (ValueError, TypeError) as err:
        raise ConfigError("synth", str(err)) from err

    enc_doc = dict(doc["encoders"])
    _check_keys("encoders", enc_doc)
    enc_seed = int(enc_doc.pop("seed", 0))
    try:
        dims = EncoderDims(**{**_dims_defaults(), **enc_doc})
    except (ValueError, TypeError) as err:
        raise ConfigError("encoders", str(err)) from err

    _check_keys("train", doc["train"])
    try:
        tcfg = train_config_from_dict({**train_config_to_dict(TrainConfig()), **doc["train"]})
    except (ValueError, TypeError) as err:
        raise ConfigError("train", str(err)) from err

    if not isinstance(doc["detectors"], list) or not doc["detectors"]:
        raise ConfigError("detectors", "must be a non-empty list")
    detectors = []
    for i, det in enumerate(doc["detectors"]):
        try:
            detectors.append(DetectorConfig(**det))
        except (ValueError, TypeError) as err:
            raise ConfigError(f"detectors[{i}]", str(err)) from err

    _check_keys("eval", doc["eval"])
    try:
        ev = EvalSettings(**doc["eval"])
    except (ValueError, TypeError) as err:
        raise ConfigError("eval", str(err)) from err

    _check_keys("data", doc["data"])
    try:
        data = DataSettings(**doc["data"])
    except (ValueError, TypeError) as err:
        raise ConfigError("data", str(err)) from err

    out = out_override or doc.get("output_dir")
    if not out:
        raise ConfigError("output_dir", "missing (set it in the config or pass --out)")

    # the synthetic world and the encoders must agree on shapes
    if (synth.grid_h, synth.grid_w) != (dims.grid_h, dims.grid_w):
        raise ConfigError("encoders.grid_h", "encoder grid must match synth grid")
    if synth.latent_dim != dims.d_lat:
        raise ConfigError("encoders.d_lat", "encoder d_lat must match synth latent_dim")
    if synth.n_classes != dims.n_classes:
        raise ConfigError("encoders.n_classes", "encoder n_classes must match synth n_classes")

    return ExperimentConfig(
        synth=synth,
        encoder_dims=dims,
        encoder_seed=enc_seed,
        train=tcfg,
        detectors=tuple(detectors),
        eval=ev,
        data=data,
        output_dir=str(out),
    )


def _dims_defaults() -> dict:
    d = EncoderDims()
    return {
        "d_lat": d.d_lat, "d_emb": d.d_emb, "d_feat": d.d_feat,
        "grid_h": d.grid_h, "grid_w": d.grid_w, "n_classes": d.n_classes,
    }


def resolved_config_dict(cfg: ExperimentConfig) -> dict:
    """Every field materialized, including the resolved extraction rank."""
    train_doc = train_config_to_dict(cfg.train)
    train_doc["rank_k"] = resolve_rank_k(cfg.train, cfg.encoder_dims.n_classes)
    return {
        "synth": synth_config_to_dict(cfg.synth),
        "encoders": {**_dims_from(cfg.encoder_dims), "seed": cfg.encoder_seed},
        "train": train_doc,
        "detectors": [
            {
                "kind": d.kind,
                "temperature": d.temperature,
                "eps": d.eps,
                "c_percentile": d.c_percentile,
                "tau": d.tau,
            }
            for d in cfg.detectors
        ],
        "eval": {
            "n_id_test": cfg.eval.n_id_test,
            "n_ood_test": cfg.eval.n_ood_test,
            "ece_bins": cfg.eval.ece_bins,
        },
        "data": {
            "shots": cfg.data.shots,
            "train_seed": cfg.data.train_seed,
            "test_seed": cfg.data.test_seed,
            "ood_seed": cfg.data.ood_seed,
            "pool_shots": cfg.data.pool_shots,
            "probe_shots": cfg.data.probe_shots,
            "probe_seed": cfg.data.probe_seed,
        },
        "output_dir": cfg.output_dir,
    }


def _dims_from(d: EncoderDims) -> dict:
    return {
        "d_lat": d.d_lat, "d_emb": d.d_emb, "d_feat": d.d_feat,
        "grid_h": d.grid_h, "grid_w": d.grid_w, "n_classes": d.n_classes,
    }


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(resolved_config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def default_config_dict(output_dir: str = "runs/default") -> dict:
    """A complete config for the default desk-scale benchmark."""
    return {
        "synth": synth_config_to_dict(SynthConfig()),
        "encoders": {**_dims_defaults(), "seed": 9},
        "train": train_config_to_dict(
            TrainConfig(modulation=Modulation("linear"), rank_k=4)
        ),
        "detectors": [
            {"kind": "mcm", "tau": 1.0},
            {"kind": "glmcm", "tau": 1.0},
            {"kind": "msp"},
            {"kind": "maxlogit"},
            {"kind": "energy", "temperature": 1.0},
            {"kind": "react", "c_percentile": 90.0},
            {"kind": "odin", "temperature": 1000.0, "eps": 0.0},
        ],
        "eval": {"n_id_test": 200, "n_ood_test": 500, "ece_bins": 15},
        "data": {
            "shots": 16, "train_seed": 101, "test_seed": 202, "ood_seed": 303,
            "pool_shots": 32, "probe_shots": 4, "probe_seed": 404,
        },
        "output_dir": output_dir,
    }


def load_config(path: str | Path, out_override: str | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("<file>", f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON: {err}") from err
    return parse_config(doc, out_override=out_override)


# ---------------------------------------------------------------------------
# deterministic file output helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def svg_grouped_bars(
    title: str, groups: list[str], series: dict[str, list[float]], path: Path
) -> None:
    """Minimal native grouped bar chart; values are assumed to lie in [0, 1]."""
    width, height, margin = 640, 360, 48
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    palette = ["#4878a8", "#d1605e", "#6aa56e", "#e0a33e", "#8c6bb1", "#737373"]
    n_groups = max(len(groups), 1)
    n_series = max(len(series), 1)
    slot = plot_w / n_groups
    bar_w = slot * 0.8 / n_series
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = height - margin - frac * plot_h
        parts.append(
            f'<text x="{margin - 6}" y="{y + 4}" text-anchor="end" font-size="10">{frac}</text>'
        )
        parts.append(
            f'<line x1="{margin}" y1="{y}" x2="{width - margin}" y2="{y}" '
            f'stroke="#dddddd" stroke-width="0.5"/>'
        )
    for gi, group in enumerate(groups):
        x0 = margin + gi * slot + slot * 0.1
        for si, (name, values) in enumerate(sorted(series.items())):
            v = min(max(values[gi], 0.0), 1.0)
            bh = v * plot_h
            x = x0 + si * bar_w
            y = height - margin - bh
            color = palette[si % len(palette)]
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{bh:.2f}" '
                f'fill="{color}"><title>{name} {group}: {v:.4f}</title></rect>'
            )
        parts.append(
            f'<text x="{x0 + slot * 0.4}" y="{height - margin + 14}" text-anchor="middle" '
            f'font-size="10">{group}</text>'
        )
    for si, name in enumerate(sorted(series)):
        color = palette[si % len(palette)]
        x = margin + si * 110
        parts.append(f'<rect x="{x}" y="{height - 16}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{x + 14}" y="{height - 7}" font-size="10">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# shared evaluation machinery


def _interleave_classes(examples: list[SynthExample], n_classes: int) -> list[SynthExample]:
    """Reorder class-major output shot-major so truncation stays balanced."""
    by_class: list[list[SynthExample]] = [[] for _ in range(n_classes)]
    for ex in examples:
        by_class[ex.label].append(ex)
    out = []
    for shot in range(max(len(b) for b in by_class)):
        for b in by_class:
            if shot < len(b):
                out.append(b[shot])
    return out


def make_test_sets(cfg: ExperimentConfig) -> tuple[list[SynthExample], list[SynthExample]]:
    per_class = -(-cfg.eval.n_id_test // cfg.synth.n_classes)  # ceil division
    id_test = _interleave_classes(
        gen_id(cfg.synth, per_class, cfg.data.test_seed), cfg.synth.n_classes
    )[: cfg.eval.n_id_test]
    ood_test = gen_ood(cfg.synth, cfg.eval.n_ood_test, cfg.data.ood_seed)
    return id_test, ood_test


def detector_names(detectors) -> list[str]:
    names = []
    seen: dict[str, int] = {}
    for det in detectors:
        count = seen.get(det.kind, 0)
        seen[det.kind] = count + 1
        names.append(det.kind if count == 0 else f"{det.kind}_{count + 1}")
    return names


def _score_example(det: DetectorConfig, ex: SynthExample, fm, text, enc: Encoders, calib):
    if det.kind == "msp":
        return score_msp(fm, text, det)
    if det.kind == "maxlogit":
        return score_maxlogit(fm, text, det)
    if det.kind == "energy":
        return score_energy(fm, text, det)
    if det.kind == "mcm":
        return score_mcm(fm, text, det)
    if det.kind == "glmcm":
        return score_glmcm(fm, text, det)
    if det.kind == "react":
        return score_react(fm, text, det, calib)
    return score_odin(ex.patches, fm, text, det, enc.image)


def evaluate_prompt(
    omega: np.ndarray,
    enc: Encoders,
    tcfg: TrainConfig,
    detectors,
    id_train: list[SynthExample],
    id_test: list[SynthExample],
    ood_test: list[SynthExample],
    ece_bins: int,
) -> dict:
    """Score every detector on the ID/OOD test sets and compute all metrics.

    ReAct calibrates its clip level on the (few-shot) ID training features.
    """
    text = text_features(omega, enc.vocab, enc.text)
    calib = np.stack([encode_image(ex.patches, enc.image).global_feat for ex in id_train])
    id_fms = [encode_image(ex.patches, enc.image, ex.example_id) for ex in id_test]
    ood_fms = [encode_image(ex.patches, enc.image, ex.example_id) for ex in ood_test]

    names = detector_names(detectors)
    per_detector = {}
    for name, det in zip(names, detectors):
        id_scores = [_score_example(det, ex, fm, text, enc, calib) for ex, fm in zip(id_test, id_fms)]
        ood_scores = [
            _score_example(det, ex, fm, text, enc, calib) for ex, fm in zip(ood_test, ood_fms)
        ]
        per_detector[name] = {
            "fpr95": fpr_at_tpr(id_scores, ood_scores, 0.95),
            "auroc": auroc(id_scores, ood_scores),
        }

    probs = np.stack([class_probs(fm.global_feat, text, tcfg.tau_train) for fm in id_fms])
    preds = probs.argmax(axis=1)
    labels = np.array([ex.label for ex in id_test])
    report = {
        "detectors": per_detector,
        "id_acc": id_accuracy(preds, labels),
        "ece": ece(probs.max(axis=1), preds == labels, ece_bins),
    }
    return report


def method_train_config(tcfg: TrainConfig, method: str, modulation_name: str | None = None):
    """Map a CLI method onto (train config, loss kind)."""
    if method == "coop":
        return replace(tcfg, lam=0.0, modulation=Modulation("none")), "coop"
    if method == "locoop":
        return replace(tcfg, modulation=Modulation("none")), "locoop"
    if method == "sct":
        mod = tcfg.modulation
        if modulation_name is not None:
            mod = Modulation(modulation_name, alpha=tcfg.modulation.alpha)
        return replace(tcfg, modulation=mod), "sct"
    raise ConfigError("method", f"unknown method {method!r}, expected one of {METHODS}")


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("SCTLAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_indexed(fn, n: int) -> list:
    """Run fn(i) for i in range(n), optionally in parallel, order preserved."""
    workers = min(_n_threads(), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    id_train = gen_id(cfg.synth, cfg.data.shots, cfg.data.train_seed)
    id_test, ood_test = make_test_sets(cfg)

    write_dataset(out / "id_train.jsonl", cfg.synth, id_train)
    write_dataset(out / "id_test.jsonl", cfg.synth, id_test)
    write_dataset(out / "ood_test.jsonl", cfg.synth, ood_test)
    _write_json(out / "resolved_config.json", resolved_config_dict(cfg))
    manifest = {
        "config_hash": config_hash(cfg),
        "files": {
            name: _sha256_file(out / name)
            for name in ("id_train.jsonl", "id_test.jsonl", "ood_test.jsonl")
        },
        "counts": {
            "id_train": len(id_train),
            "id_test": len(id_test),
            "ood_test": len(ood_test),
        },
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(id_train)} train / {len(id_test)} id-test / {len(ood_test)} ood-test "
          f"examples to {out}")
    return EXIT_OK


def _require_datasets(out: Path) -> tuple[list[SynthExample], list[SynthExample], list[SynthExample]]:
    for name in ("id_train.jsonl", "id_test.jsonl", "ood_test.jsonl"):
        if not (out / name).is_file():
            raise ConfigError("<datasets>", f"missing {out / name}; run the gen command first")
    _, id_train = read_dataset(out / "id_train.jsonl")
    _, id_test = read_dataset(out / "id_test.jsonl")
    _, ood_test = read_dataset(out / "ood_test.jsonl")
    return id_train, id_test, ood_test


def cmd_train(cfg: ExperimentConfig, method: str, modulation_name: str | None) -> int:
    out = Path(cfg.output_dir)
    id_train, _, _ = _require_datasets(out)
    enc = build_encoders(cfg.encoder_dims, cfg.encoder_seed)
    tcfg, kind = method_train_config(cfg.train, method, modulation_name)
    encoded = encode_examples(id_train, enc)
    prompt, trace = train(encoded, enc, tcfg, kind)

    doc = prompt_to_json_dict(prompt, tcfg, trace)
    doc["method"] = method
    doc["config_hash"] = config_hash(cfg)
    _write_json(out / f"prompt_{method}.json", doc)
    _write_csv(
        out / f"loss_trace_{method}.csv",
        ["epoch", "loss"],
        [[e, float(v)] for e, v in enumerate(trace)],
    )
    print(f"trained {method}: final epoch loss {trace[-1]:.6f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, prompt_path: str) -> int:
    out = Path(cfg.output_dir)
    ppath = Path(prompt_path)
    if not ppath.is_file():
        raise ConfigError("<prompt>", f"prompt file not found: {ppath}")
    id_train, id_test, ood_test = _require_datasets(out)
    enc = build_encoders(cfg.encoder_dims, cfg.encoder_seed)
    doc = json.loads(ppath.read_text())
    prompt, tcfg, _ = prompt_from_json_dict(doc)

    report = evaluate_prompt(
        prompt.vectors, enc, tcfg, cfg.detectors, id_train, id_test, ood_test,
        cfg.eval.ece_bins,
    )
    report["config_hash"] = config_hash(cfg)
    report["prompt_file"] = ppath.name
    report["seeds"] = {
        "train_seed": tcfg.seed,
        "data_train_seed": cfg.data.train_seed,
        "test_seed": cfg.data.test_seed,
        "ood_seed": cfg.data.ood_seed,
        "encoder_seed": cfg.encoder_seed,
        "synth_seed": cfg.synth.seed,
    }
    report["resolved_config"] = resolved_config_dict(cfg)

    stem = ppath.stem.replace("prompt_", "") or "model"
    _write_json(out / f"report_{stem}.json", report)
    rows = [
        [name, float(vals["fpr95"]), float(vals["auroc"]),
         float(report["id_acc"]), float(report["ece"])]
        for name, vals in report["detectors"].items()
    ]
    _write_csv(out / f"report_{stem}.csv", ["detector", "fpr95", "auroc", "id_acc", "ece"], rows)
    for name, vals in report["detectors"].items():
        print(f"{stem:>8s} {name:>9s}  fpr95={vals['fpr95']:.4f}  auroc={vals['auroc']:.4f}")
    print(f"{stem:>8s} id_acc={report['id_acc']:.4f} ece={report['ece']:.4f}")
    return EXIT_OK


def _seeded(cfg: ExperimentConfig, i: int) -> tuple[TrainConfig, int]:
    """Per-trial derivation: trial i shifts the training seed and the
    few-shot draw while the world, encoders, and test sets stay fixed."""
    return replace(cfg.train, seed=cfg.train.seed + i), cfg.data.train_seed + i


def cmd_compare(cfg: ExperimentConfig, methods: list[str], n_seeds: int) -> int:
    if n_seeds < 1:
        raise ConfigError("seeds", f"need at least 1 seed, got {n_seeds}")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = build_encoders(cfg.encoder_dims, cfg.encoder_seed)
    id_test, ood_test = make_test_sets(cfg)
    names = detector_names(cfg.detectors)

    def run_seed(i: int) -> list[tuple]:
        tcfg_i, split_seed = _seeded(cfg, i)
        id_train = gen_id(cfg.synth, cfg.data.shots, split_seed)
        encoded = encode_examples(id_train, enc)
        rows = []
        for method in methods:
            tcfg, kind = method_train_config(tcfg_i, method)
            prompt, _ = train(encoded, enc, tcfg, kind)
            rep = evaluate_prompt(
                prompt.vectors, enc, tcfg, cfg.detectors, id_train, id_test, ood_test,
                cfg.eval.ece_bins,
            )
            for name in names:
                rows.append(
                    (method, name, i, rep["detectors"][name]["fpr95"],
                     rep["detectors"][name]["auroc"], rep["id_acc"], rep["ece"])
                )
        return rows

    all_rows = [row for rows in _run_indexed(run_seed, n_seeds) for row in rows]

    table: list[list] = [list(r) for r in all_rows]
    for method in methods:
        for name in names:
            vals = np.array(
                [[r[3], r[4], r[5], r[6]] for r in all_rows if r[0] == method and r[1] == name]
            )
            mean = vals.mean(axis=0)
            std = vals.std(axis=0)
            table.append([method, name, "mean", *map(float, mean)])
            table.append([method, name, "std", *map(float, std)])
    _write_csv(
        out / "comparison.csv",
        ["method", "detector", "seed", "fpr95", "auroc", "id_acc", "ece"],
        table,
    )

    series = {
        method: [
            float(np.mean([r[3] for r in all_rows if r[0] == method and r[1] == name]))
            for name in names
        ]
        for method in methods
    }
    svg_grouped_bars("mean FPR95 by method (lower is better)", names, series, out / "comparison.svg")

    for method in methods:
        for name in names:
            mean_fpr = np.mean([r[3] for r in all_rows if r[0] == method and r[1] == name])
            mean_auc = np.mean([r[4] for r in all_rows if r[0] == method and r[1] == name])
            print(f"{method:>8s} {name:>9s}  fpr95={mean_fpr:.4f}  auroc={mean_auc:.4f}")
    return EXIT_OK


def cmd_cohort(cfg: ExperimentConfig, shots_per_cohort: int, n_seeds: int) -> int:
    if shots_per_cohort < 1:
        raise ConfigError("shots_per_cohort", "must be >= 1")
    if n_seeds < 1:
        raise ConfigError("seeds", f"need at least 1 seed, got {n_seeds}")
    if cfg.data.pool_shots < 2 * shots_per_cohort:
        raise ConfigError(
            "data.pool_shots",
            f"pool of {cfg.data.pool_shots} shots/class cannot supply two disjoint "
            f"cohorts of {shots_per_cohort}",
        )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = build_encoders(cfg.encoder_dims, cfg.encoder_seed)
    id_test, ood_test = make_test_sets(cfg)
    if "glmcm" not in [d.kind for d in cfg.detectors]:
        raise ConfigError("detectors", "cohort experiment reports the glmcm detector; add it")
    det_index = [d.kind for d in cfg.detectors].index("glmcm")
    det_name = detector_names(cfg.detectors)[det_index]

    def run_seed(i: int) -> tuple[list[list], dict]:
        tcfg_i, split_seed = _seeded(cfg, i)
        probe_set = gen_id(cfg.synth, cfg.data.probe_shots, cfg.data.probe_seed + i)
        pool = gen_id(cfg.synth, cfg.data.pool_shots, split_seed)
        probe_cfg, probe_kind = method_train_config(tcfg_i, "locoop")
        probe_prompt, _ = train(encode_examples(probe_set, enc), enc, probe_cfg, probe_kind)

        low, high = uncertainty_cohorts(
            pool, (probe_prompt.vectors, enc, probe_cfg.tau_train), shots_per_cohort
        )
        rows = []
        for cohort_name, subset in (("low_uncertainty", low), ("high_uncertainty", high)):
            tcfg, kind = method_train_config(tcfg_i, "locoop")
            prompt, _ = train(encode_examples(subset, enc), enc, tcfg, kind)
            rep = evaluate_prompt(
                prompt.vectors, enc, tcfg, cfg.detectors, subset, id_test, ood_test,
                cfg.eval.ece_bins,
            )
            det = rep["detectors"][det_name]
            rows.append([i, cohort_name, float(det["fpr95"]), float(det["auroc"]),
                         float(rep["id_acc"]), float(rep["ece"])])
        low_ids = sorted(ex.example_id for ex in low)
        high_ids = sorted(ex.example_id for ex in high)
        info = {
            "seed": i,
            "cohorts_disjoint": not set(low_ids) & set(high_ids),
            "pool_probe_disjoint": not {e.example_id for e in pool}
            & {e.example_id for e in probe_set},
            "low_ids": low_ids,
            "high_ids": high_ids,
        }
        return rows, info

    results = _run_indexed(run_seed, n_seeds)
    rows = [row for r, _ in results for row in r]
    infos = [info for _, info in results]
    if not all(info["cohorts_disjoint"] for info in infos):
        raise ConfigError("<cohorts>", "cohort overlap detected")

    _write_csv(
        out / "cohort.csv",
        ["seed", "cohort", "fpr95", "auroc", "id_acc", "ece"],
        rows,
    )
    _write_json(
        out / "cohort_manifest.json",
        {
            "config_hash": config_hash(cfg),
            "detector": det_name,
            "shots_per_cohort": shots_per_cohort,
            "seeds": infos,
        },
    )
    low_mean = float(np.mean([r[2] for r in rows if r[1] == "low_uncertainty"]))
    high_mean = float(np.mean([r[2] for r in rows if r[1] == "high_uncertainty"]))
    print(f"mean {det_name} fpr95: low-uncertainty={low_mean:.4f} high-uncertainty={high_mean:.4f}")
    return EXIT_OK


# gradcheck fixture geometry; deliberately tiny so central differences on
# every prompt coordinate stay cheap
_GC_DIMS = EncoderDims(d_lat=5, d_emb=6, d_feat=8, grid_h=2, grid_w=2, n_classes=4)

GRADCHECK_MODULATIONS = (
    Modulation("none"),
    Modulation("linear"),
    Modulation("power", alpha=0.5),
    Modulation("power", alpha=2.0),
    Modulation("power", alpha=4.0),
    Modulation("logarithmic"),
    Modulation("trigonometric"),
)
GRADCHECK_REGULARIZERS = (
    Regularizer("neg_entropy"),
    Regularizer("uniform_ce"),
    # margins chosen so the hinge is active on toy logits and the gradient
    # path is actually exercised
    Regularizer("energy", m_in=-1.0, m_out=1.0),
)


def _mod_label(mod: Modulation) -> str:
    if mod.kind == "power":
        return f"power(alpha={mod.alpha:g})"
    return mod.kind


def cmd_gradcheck(cfg: ExperimentConfig, n_fixtures: int, corrupt: float = 0.0) -> int:
    if n_fixtures < 1:
        raise ConfigError("fixtures", "need at least 1 fixture")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dims = _GC_DIMS
    enc = build_encoders(dims, cfg.encoder_seed)
    scfg = SynthConfig(
        n_classes=dims.n_classes, n_background=3, grid_h=dims.grid_h, grid_w=dims.grid_w,
        latent_dim=dims.d_lat, class_sep=3.0, noise=0.5, fg_fraction=0.6,
        seed=cfg.synth.seed,
    )

    rows = []
    worst = 0.0
    failures = []
    for kind, mod, reg in itertools.product(("coop", "locoop", "sct"),
                                            GRADCHECK_MODULATIONS, GRADCHECK_REGULARIZERS):
        combo_err = 0.0
        for fi in range(n_fixtures):
            tcfg = TrainConfig(
                lam=0.25, rank_k=1, lr=0.01, n_tokens=2, tau_train=cfg.train.tau_train,
                modulation=mod, regularizer=reg, seed=cfg.train.seed + fi,
            )
            data = gen_id(scfg, shots=2, split_seed=1000 + fi)
            batch = encode_examples(data[: 4], enc)
            rng = make_rng(tcfg.seed, 99, fi)
            omega = init_prompt(tcfg, dims.d_emb).vectors + rng.normal(0.0, 0.1, (2, dims.d_emb))
            analytic = grad_prompt(kind, batch, omega, enc, tcfg) + corrupt
            numeric = finite_diff_grad(
                lambda w: batch_loss(kind, batch, w, enc, tcfg), omega, 1e-5
            )
            combo_err = max(combo_err, max_rel_error(analytic, numeric))
        label = (kind, _mod_label(mod), reg.kind)
        ok = combo_err < GRADCHECK_TOL
        rows.append([*label, float(combo_err), "pass" if ok else "FAIL"])
        if not ok:
            failures.append(label)
        worst = max(worst, combo_err)
        print(f"{'PASS' if ok else 'FAIL'} loss={kind:<7s} modulation={label[1]:<18s} "
              f"regularizer={reg.kind:<12s} max_rel_err={combo_err:.3e}")

    _write_csv(
        out / "gradcheck.csv",
        ["loss", "modulation", "regularizer", "max_rel_err", "status"],
        rows,
    )
    print(f"gradcheck: {len(rows)} combinations, worst max_rel_err={worst:.3e}, "
          f"tolerance {GRADCHECK_TOL:g}")
    if failures:
        print(f"gradcheck FAILED for {len(failures)} combinations: {failures}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sctlab",
        description="Synthetic prompt-tuning OOD detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the experiment config JSON")
        p.add_argument("--out", default=None, help="override the config's output_dir")
        return p

    add("gen", "generate the ID train/test and OOD test datasets")

    p_train = add("train", "tune a prompt on the generated training set")
    p_train.add_argument("--method", choices=METHODS, default="sct")
    p_train.add_argument(
        "--modulation",
        choices=("none", "linear", "power", "logarithmic", "trigonometric"),
        default=None,
        help="override the config's modulation kind (sct only)",
    )

    p_eval = add("eval", "score a trained prompt with every configured detector")
    p_eval.add_argument("--prompt", required=True, help="prompt JSON produced by train")

    p_cmp = add("compare", "train and evaluate several methods across seeds")
    p_cmp.add_argument("--methods", default="locoop,sct", help="comma-separated method list")
    p_cmp.add_argument("--seeds", type=int, default=5)

    p_coh = add("cohort", "low- vs high-uncertainty cohort experiment")
    p_coh.add_argument("--shots-per-cohort", type=int, default=16)
    p_coh.add_argument("--seeds", type=int, default=5)

    p_gc = add("gradcheck", "verify analytic prompt gradients against finite differences")
    p_gc.add_argument("--fixtures", type=int, default=10)
    p_gc.add_argument(
        "--corrupt-gradient",
        type=float,
        default=0.0,
        help="test hook: bias added to analytic gradients (forces failure)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, out_override=args.out)
        if args.command == "gen":
            code = cmd_gen(cfg)
        elif args.command == "train":
            code = cmd_train(cfg, args.method, args.modulation)
        elif args.command == "eval":
            code = cmd_eval(cfg, args.prompt)
        elif args.command == "compare":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            code = cmd_compare(cfg, methods, args.seeds)
        elif args.command == "cohort":
            code = cmd_cohort(cfg, args.shots_per_cohort, args.seeds)
        else:
            code = cmd_gradcheck(cfg, args.fixtures, args.corrupt_gradient)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"[{args.command}] completed in {time.perf_counter() - started:.2f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
