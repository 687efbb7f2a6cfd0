"""Split strategies and per-replicate seed derivation.

Four strategies cover every task: predefined manifest tags, class-stratified
random splits, leave-one-patient-out k-fold, and the five-fold patient-
disjoint uniform subsampling used for the TCGA pan-cancer task. All
randomness flows from numpy's counter-based Philox generator seeded through
a documented splitmix-style derivation, so fold membership is byte-identical
across platforms and runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import BoundDataset
from .errors import ConfigurationError, ContractViolation

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

PART_NAMES = ("train", "val", "test")


def _splitmix64(z: int) -> int:
    """Finalizer of the splitmix64 generator (fixed public constants)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    """FNV-1a over UTF-8 bytes; a stable, unsalted string hash."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class SeedBundle:
    """The three derived streams used by one replicate of one task."""

    master_seed: int
    split_seed: int
    shuffle_seed: int
    init_seed: int


def derive_seeds(master: int, task_id: str, replicate: int) -> SeedBundle:
    """Pure derivation: mix master XOR hash(task_id) XOR replicate, then walk
    the splitmix sequence for the three per-purpose seeds."""
    if replicate < 0:
        raise ContractViolation(f"replicate must be >= 0, got {replicate}")
    base = (master ^ _fnv1a64(task_id) ^ replicate) & _MASK64
    split_seed = _splitmix64(base + _GOLDEN)
    shuffle_seed = _splitmix64(base + 2 * _GOLDEN)
    init_seed = _splitmix64(base + 3 * _GOLDEN)
    return SeedBundle(master & _MASK64, split_seed, shuffle_seed, init_seed)


def rng_from_seed(seed: int) -> np.random.Generator:
    """The harness-wide generator: counter-based Philox."""
    return np.random.Generator(np.random.Philox(seed & _MASK64))


@dataclass
class Fold:
    train_ids: list[str]
    val_ids: list[str] | None
    test_ids: list[str]


@dataclass
class SplitPlan:
    strategy: str
    folds: list[Fold]
    seed: int
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for i, fold in enumerate(self.folds):
            train = set(fold.train_ids)
            test = set(fold.test_ids)
            val = set(fold.val_ids or [])
            if train & test:
                raise ContractViolation(f"fold {i}: train/test overlap {sorted(train & test)[:3]}")
            if train & val:
                raise ContractViolation(f"fold {i}: train/val overlap {sorted(train & val)[:3]}")
            if val & test:
                raise ContractViolation(f"fold {i}: val/test overlap {sorted(val & test)[:3]}")


def predefined_split(bound: BoundDataset) -> SplitPlan:
    """Single fold mirroring the manifest's split tags exactly."""
    untagged = [item for item, tag in zip(bound.item_ids, bound.splits) if tag == "none"]
    if untagged:
        raise ConfigurationError(
            f"{bound.dataset_id}: {len(untagged)} items lack a predefined split "
            f"(first: {untagged[:5]})"
        )
    train = [i for i, tag in zip(bound.item_ids, bound.splits) if tag == "train"]
    val = [i for i, tag in zip(bound.item_ids, bound.splits) if tag == "val"]
    test = [i for i, tag in zip(bound.item_ids, bound.splits) if tag == "test"]
    if not train:
        raise ConfigurationError(f"{bound.dataset_id}: predefined split has no training data")
    if not test:
        raise ConfigurationError(f"{bound.dataset_id}: predefined split has no test data")
    return SplitPlan(
        strategy="Predefined",
        folds=[Fold(train, val or None, test)],
        seed=0,
    )


def patient_kfold(bound: BoundDataset) -> SplitPlan:
    """Leave-one-patient-out: fold i tests patient i, trains on the rest.

    Patients are ordered by sorted id so the plan is independent of manifest
    row order.
    """
    for item, patient in zip(bound.item_ids, bound.patient_ids):
        if not patient:
            raise ContractViolation(f"item {item!r} has empty patient_id")
    patients = sorted(set(bound.patient_ids))
    if len(patients) < 2:
        raise ConfigurationError(
            f"{bound.dataset_id}: patient k-fold needs >= 2 patients, got {len(patients)}"
        )
    by_patient = {p: [] for p in patients}
    for item, patient in zip(bound.item_ids, bound.patient_ids):
        by_patient[patient].append(item)
    folds = []
    for held_out in patients:
        test = by_patient[held_out]
        train = [i for p in patients if p != held_out for i in by_patient[p]]
        folds.append(Fold(train, None, test))
    return SplitPlan(strategy="PatientKFold", folds=folds, seed=0)


def tcga_uniform_folds(
    bound: BoundDataset,
    per_class: int = 100,
    n_folds: int = 5,
    seed: int = 0,
) -> SplitPlan:
    """Patient-disjoint uniform folds with per-class subsampling.

    Patients are packed into n_folds groups greedily, largest item count
    first, each placed into the currently smallest group. Within each group,
    up to per_class items per class are sampled without replacement; each
    fold then serves as the test set against the other folds' samples.
    """
    if per_class <= 0 or n_folds < 2:
        raise ContractViolation(f"need per_class > 0 and n_folds >= 2, got {per_class}/{n_folds}")
    for item, patient in zip(bound.item_ids, bound.patient_ids):
        if not patient:
            raise ContractViolation(f"item {item!r} has empty patient_id")
    if bound.labels is None:
        raise ContractViolation("uniform folds need class labels")

    counts = {}
    for patient in bound.patient_ids:
        counts[patient] = counts.get(patient, 0) + 1
    if len(counts) < n_folds:
        raise ConfigurationError(
            f"{bound.dataset_id}: {len(counts)} patients cannot fill {n_folds} disjoint folds"
        )
    # Greedy largest-first bin packing; ties broken by patient id, then by
    # group index, so assignment is a pure function of the inputs.
    order = sorted(counts, key=lambda p: (-counts[p], p))
    group_of = {}
    loads = [0] * n_folds
    for patient in order:
        g = min(range(n_folds), key=lambda i: (loads[i], i))
        group_of[patient] = g
        loads[g] += counts[patient]

    classes = sorted(set(int(v) for v in bound.labels))
    members = {(g, c): [] for g in range(n_folds) for c in classes}
    for item, patient, label in zip(bound.item_ids, bound.patient_ids, bound.labels):
        members[(group_of[patient], int(label))].append(item)

    rng = rng_from_seed(seed)
    warnings = []
    sampled = []
    for g in range(n_folds):
        chosen = []
        for c in classes:
            pool = members[(g, c)]
            if len(pool) < per_class:
                warnings.append(
                    f"fold {g}: class {c} has {len(pool)} items, wanted {per_class}"
                )
            take = min(per_class, len(pool))
            if take:
                idx = rng.choice(len(pool), size=take, replace=False)
                chosen.extend(pool[int(i)] for i in np.sort(idx))
        sampled.append(chosen)

    folds = []
    for g in range(n_folds):
        train = [item for o in range(n_folds) if o != g for item in sampled[o]]
        folds.append(Fold(train, None, list(sampled[g])))
    return SplitPlan(
        strategy="TcgaUniformFolds", folds=folds, seed=seed, warnings=warnings
    )


def stratified_random_split(
    bound: BoundDataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitPlan:
    """Per-class proportional split into (train, val, test).

    Allocation floors each part's share and assigns the rounding residue to
    train. A class with fewer items than active parts goes entirely to train
    with a recorded warning.
    """
    if len(fractions) != 3:
        raise ContractViolation(f"fractions must be (train, val, test), got {fractions}")
    if any(f < 0 for f in fractions):
        raise ContractViolation(f"negative fraction in {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation(f"fractions sum to {sum(fractions)}, expected 1")
    if bound.labels is None:
        raise ContractViolation("stratified split needs class labels")

    rng = rng_from_seed(seed)
    active_parts = sum(1 for f in fractions if f > 0)
    warnings = []
    parts = {name: [] for name in PART_NAMES}
    for c in sorted(set(int(v) for v in bound.labels)):
        pool = [item for item, label in zip(bound.item_ids, bound.labels) if int(label) == c]
        if len(pool) < active_parts:
            warnings.append(f"class {c} has {len(pool)} items (< {active_parts} parts); all to train")
            parts["train"].extend(pool)
            continue
        perm = rng.permutation(len(pool))
        shuffled = [pool[int(i)] for i in perm]
        n = len(pool)
        take = [int(f * n) for f in fractions]
        take[0] += n - sum(take)
        cursor = 0
        for name, count in zip(PART_NAMES, take):
            parts[name].extend(shuffled[cursor : cursor + count])
            cursor += count
    return SplitPlan(
        strategy="StratifiedRandom",
        folds=[Fold(parts["train"], parts["val"] or None, parts["test"])],
        seed=seed,
        warnings=warnings,
    )


def export_split_csv(plan: SplitPlan, path: str | Path) -> None:
    """Audit export: one row per item assignment."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold_id", "part", "item_id"])
        for fold_id, fold in enumerate(plan.folds):
            for item in fold.train_ids:
                writer.writerow([fold_id, "train", item])
            for item in fold.val_ids or []:
                writer.writerow([fold_id, "val", item])
            for item in fold.test_ids:
                writer.writerow([fold_id, "test", item])
