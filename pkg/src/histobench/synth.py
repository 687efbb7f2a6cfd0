"""Synthetic benchmark generation with closed-form oracles.

Three dataset kinds cover the harness's protocols end to end: separated
Gaussian classes for linear probing and penalty-grid search, a known linear
map for the expression-regression path, and witness-rate bags for attention
MIL. Every generator is a pure function of its spec, writes store-format
files (embeddings, manifest, oracle document), and reports the analytic
quantity a correct evaluator should approach.

Each spec fabricates embeddings for several pseudo-model ids; later model
ids receive extra feature noise so reports built from the suite have a
meaningful ranking. The clean signal is drawn once, so models differ only
by their noise overlay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embeddings import (
    GENE_TARGET_COUNT,
    DatasetManifest,
    EmbeddingMatrix,
    TokenVariant,
    write_embeddings,
    write_manifest,
)
from .errors import ConfigurationError
from .splits import derive_seeds, rng_from_seed

KINDS = ("gaussian-classification", "linear-regression", "mil-bags")
PART_ORDER = ("train", "val", "test")

# Half of the signal plus an independent overlay: keeps the concatenated
# variant informative without duplicating the primary token exactly.
MEAN_TOKEN_SIGNAL = 0.5
MEAN_TOKEN_NOISE = 0.3


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for one synthetic dataset; deterministic given seed."""

    kind: str
    dataset_id: str
    dim: int = 16
    seed: int = 0
    # gaussian-classification: items per part; mil-bags: bags per part
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    n_classes: int = 2
    separation: float = 4.0
    # linear-regression
    n_patients: int = 3
    spots_per_patient: int = 40
    noise: float = 0.0
    # mil-bags
    instances_per_bag: int = 20
    witness_rate: float = 0.3
    witness_center: float = 3.0
    # pseudo-models receiving the embeddings, with per-model feature noise
    model_ids: tuple = ("synth-a", "synth-b")
    model_noise: tuple = (0.0, 0.6)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown synthetic kind {self.kind!r}")
        if not self.dataset_id:
            raise ConfigurationError("dataset_id must be non-empty")
        if self.dim <= 0:
            raise ConfigurationError(f"dim must be > 0, got {self.dim}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train == 0:
            raise ConfigurationError("part sizes must be >= 0 with a non-empty train part")
        if self.kind == "gaussian-classification":
            if self.n_classes < 2:
                raise ConfigurationError(f"need >= 2 classes, got {self.n_classes}")
            if self.separation <= 0:
                raise ConfigurationError(f"separation must be > 0, got {self.separation}")
        if self.kind == "linear-regression":
            if self.n_patients < 2:
                raise ConfigurationError(f"need >= 2 patients, got {self.n_patients}")
            if self.spots_per_patient < 2:
                raise ConfigurationError("need >= 2 spots per patient")
            if self.noise < 0:
                raise ConfigurationError(f"noise must be >= 0, got {self.noise}")
        if self.kind == "mil-bags":
            if self.instances_per_bag <= 0:
                raise ConfigurationError("instances_per_bag must be > 0")
            if not 0 < self.witness_rate <= 1:
                raise ConfigurationError(
                    f"witness_rate must be in (0, 1], got {self.witness_rate}"
                )
            if self.witness_center <= 0:
                raise ConfigurationError("witness_center must be > 0")
        if len(self.model_ids) != len(self.model_noise) or not self.model_ids:
            raise ConfigurationError("model_ids and model_noise must align and be non-empty")
        if len(set(self.model_ids)) != len(self.model_ids):
            raise ConfigurationError("duplicate model_id in spec")
        if any(s < 0 for s in self.model_noise):
            raise ConfigurationError("model_noise entries must be >= 0")


def class_centers(n_classes: int, separation: float) -> list:
    """Collinear centers at (2c - (k-1)) * separation along the first axis."""
    return [(2 * c - (n_classes - 1)) * separation for c in range(n_classes)]


def bayes_balanced_accuracy(
    n_classes: int, separation: float, feature_noise: float = 0.0
) -> float:
    """Closed-form optimum for equally spaced unit-variance collinear classes.

    Adjacent centers sit 2*separation apart, so each decision boundary is
    separation away from its centers. Edge classes err on one side, interior
    classes on two. Extra feature noise rescales the effective separation.
    """
    s = separation / math.sqrt(1.0 + feature_noise**2)
    edge = normal_cdf(s)
    interior = 2 * edge - 1
    return (2 * edge + (n_classes - 2) * interior) / n_classes


def _gaussian_dataset(spec: SynthSpec):
    rng = rng_from_seed(spec.seed)
    centers = class_centers(spec.n_classes, spec.separation)
    rows, item_ids, labels, splits = [], [], [], []
    for part, count in zip(PART_ORDER, (spec.n_train, spec.n_val, spec.n_test)):
        for i in range(count):
            label = i % spec.n_classes
            x = rng.normal(size=spec.dim)
            x[0] += centers[label]
            rows.append(x)
            item_ids.append(f"{part}{i:05d}")
            labels.append(label)
            splits.append(part)
    X = np.asarray(rows)
    manifest = DatasetManifest(
        dataset_id=spec.dataset_id,
        task_kind="patch-classification",
        item_ids=item_ids,
        patient_ids=list(item_ids),
        slide_ids=list(item_ids),
        splits=splits,
        fold_ids=[None] * len(item_ids),
        labels=np.asarray(labels, dtype=np.int64),
    )
    oracle = {
        "kind": spec.kind,
        "dataset_id": spec.dataset_id,
        "n_classes": spec.n_classes,
        "separation": spec.separation,
        "dim": spec.dim,
        "bayes_balanced_accuracy": bayes_balanced_accuracy(
            spec.n_classes, spec.separation
        ),
        "bayes_balanced_accuracy_per_model": {
            model: bayes_balanced_accuracy(spec.n_classes, spec.separation, noise)
            for model, noise in zip(spec.model_ids, spec.model_noise)
        },
    }
    return X, manifest, oracle


def _regression_dataset(spec: SynthSpec):
    rng = rng_from_seed(spec.seed)
    n = spec.n_patients * spec.spots_per_patient
    X = rng.normal(size=(n, spec.dim))
    W = rng.normal(size=(GENE_TARGET_COUNT, spec.dim)) / math.sqrt(spec.dim)
    intercept = rng.normal(size=GENE_TARGET_COUNT)
    Y = X @ W.T + intercept
    if spec.noise > 0:
        Y = Y + spec.noise * rng.normal(size=Y.shape)
    item_ids, patients = [], []
    for p in range(spec.n_patients):
        for s in range(spec.spots_per_patient):
            item_ids.append(f"p{p}s{s:04d}")
            patients.append(f"p{p}")
    manifest = DatasetManifest(
        dataset_id=spec.dataset_id,
        task_kind="multivariate-regression",
        item_ids=item_ids,
        patient_ids=patients,
        slide_ids=list(patients),
        splits=["none"] * n,
        fold_ids=[None] * n,
        targets=Y,
    )
    oracle = {
        "kind": spec.kind,
        "dataset_id": spec.dataset_id,
        "noise": spec.noise,
        "true_weights": [[float(v) for v in row] for row in W],
        "true_intercept": [float(v) for v in intercept],
        "expected_per_gene_r": 1.0 if spec.noise == 0 else None,
    }
    return X, manifest, oracle


def _mil_dataset(spec: SynthSpec):
    rng = rng_from_seed(spec.seed)
    c = spec.witness_center
    m = spec.instances_per_bag
    rows, item_ids, labels, splits, slides = [], [], [], [], []
    bag_index = 0
    for part, count in zip(PART_ORDER, (spec.n_train, spec.n_val, spec.n_test)):
        for _ in range(count):
            label = bag_index % 2
            slide = f"bag{bag_index:04d}"
            X = rng.normal(size=(m, spec.dim))
            X[:, 0] -= c
            if label == 1:
                mask = np.zeros(m, dtype=bool)
                while not mask.any():
                    mask = rng.random(m) < spec.witness_rate
                X[mask, 0] += 2 * c
            for j in range(m):
                rows.append(X[j])
                item_ids.append(f"{slide}/i{j:03d}")
                labels.append(label)
                splits.append(part)
                slides.append(slide)
            bag_index += 1
    X_all = np.asarray(rows)
    manifest = DatasetManifest(
        dataset_id=spec.dataset_id,
        task_kind="slide-classification",
        item_ids=item_ids,
        patient_ids=list(slides),
        slide_ids=slides,
        splits=splits,
        fold_ids=[None] * len(item_ids),
        labels=np.asarray(labels, dtype=np.int64),
    )
    spec_rate = 1.0 - (1.0 - spec.witness_rate) ** m
    hit = normal_cdf(c)
    oracle = {
        "kind": spec.kind,
        "dataset_id": spec.dataset_id,
        "witness_rate": spec.witness_rate,
        "instances_per_bag": m,
        "witness_center": c,
        # chance an untruncated witness mask is non-empty; labels redraw
        # empty masks, so every positive bag holds at least one witness
        "bag_positive_rate": spec_rate,
        "threshold_specificity": hit**m,
        "threshold_sensitivity_floor": hit,
        "threshold_balanced_accuracy_floor": (hit + hit**m) / 2.0,
    }
    return X_all, manifest, oracle


_GENERATORS = {
    "gaussian-classification": _gaussian_dataset,
    "linear-regression": _regression_dataset,
    "mil-bags": _mil_dataset,
}


@dataclass(frozen=True)
class SynthArtifacts:
    dataset_id: str
    manifest_path: Path
    embedding_paths: tuple
    oracle_path: Path
    oracle: dict


def synth_generate(spec: SynthSpec, out_root: str | Path) -> SynthArtifacts:
    """Write one synthetic dataset into the store layout under out_root.

    Produces manifests/<dataset>.csv, per-model cls.pemb and mean.pemb under
    embeddings/<dataset>/<model>/, and oracles/<dataset>.json. Byte-identical
    on repeated calls with the same spec.
    """
    out_root = Path(out_root)
    X, manifest, oracle = _GENERATORS[spec.kind](spec)

    manifest_dir = out_root / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = manifest_dir / f"{spec.dataset_id}.csv"
    write_manifest(manifest, manifest_path)

    embedding_paths = []
    for model_id, noise in zip(spec.model_ids, spec.model_noise):
        stream = rng_from_seed(
            derive_seeds(spec.seed, f"{spec.dataset_id}/{model_id}", 0).init_seed
        )
        Xm = X + noise * stream.normal(size=X.shape) if noise > 0 else X
        mean_view = MEAN_TOKEN_SIGNAL * Xm + MEAN_TOKEN_NOISE * stream.normal(size=X.shape)
        model_dir = out_root / "embeddings" / spec.dataset_id / model_id
        model_dir.mkdir(parents=True, exist_ok=True)
        for name, values in (("cls", Xm), ("mean", mean_view)):
            matrix = EmbeddingMatrix(
                model_id=model_id,
                dataset_id=spec.dataset_id,
                variant=TokenVariant.CLS,
                items=values.astype(np.float32),
                item_ids=list(manifest.item_ids),
            )
            path = model_dir / f"{name}.pemb"
            write_embeddings(matrix, path)
            embedding_paths.append(path)

    oracle_dir = out_root / "oracles"
    oracle_dir.mkdir(parents=True, exist_ok=True)
    oracle_path = oracle_dir / f"{spec.dataset_id}.json"
    oracle_path.write_text(
        json.dumps(oracle, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return SynthArtifacts(
        dataset_id=spec.dataset_id,
        manifest_path=manifest_path,
        embedding_paths=tuple(embedding_paths),
        oracle_path=oracle_path,
        oracle=oracle,
    )


# Companion data for the shipped synthetic registry: one spec per task,
# sized so a full suite run stays inside a small wall-clock budget.
DEFAULT_SUITE = (
    SynthSpec(
        kind="gaussian-classification",
        dataset_id="synth-patch",
        separation=4.0,
        n_train=2000,
        n_val=500,
        n_test=1000,
        seed=11,
    ),
    SynthSpec(
        kind="gaussian-classification",
        dataset_id="synth-grid",
        separation=1.5,
        n_train=600,
        n_val=0,
        n_test=400,
        seed=22,
    ),
    SynthSpec(
        kind="mil-bags",
        dataset_id="synth-bags",
        n_train=60,
        n_val=30,
        n_test=30,
        seed=33,
    ),
    SynthSpec(
        kind="linear-regression",
        dataset_id="synth-genes",
        n_patients=3,
        spots_per_patient=40,
        noise=0.1,
        seed=44,
    ),
)


def generate_suite(out_root: str | Path, specs=DEFAULT_SUITE) -> list:
    return [synth_generate(spec, out_root) for spec in specs]


def load_suite_spec(path: str | Path) -> list:
    """Parse a JSON document holding one spec object or a list of them."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    entries = doc if isinstance(doc, list) else [doc]
    specs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigurationError(f"{path}: entry {i} is not an object")
        try:
            spec = SynthSpec(**{
                k: tuple(v) if isinstance(v, list) else v for k, v in entry.items()
            })
        except TypeError as exc:
            raise ConfigurationError(f"{path}: entry {i}: {exc}") from exc
        specs.append(spec)
    return specs
