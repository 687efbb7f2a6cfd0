"""Run planning, cell-level caching, parallel execution, and report output.

A run is a cross product of (task, model, token variant, replicate) cells.
Each cell is a pure function of its input files and derived seeds, keyed by
a content hash, so completed cells are skipped on re-run and results are
independent of worker count. Workers compute; only the orchestrator writes.

Store layout under one root directory:

    manifests/<dataset_id>.csv
    embeddings/<dataset_id>/<model_id>/cls.pemb        primary token
    embeddings/<dataset_id>/<model_id>/mean.pemb       mean token (optional)
    results/<cache_key>.json                           one file per cell
    reports/                                           rendered tables
    model_cards.json                                   optional, for scatter data
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import (
    TokenVariant,
    concat_cls_mean,
    join_manifest,
    load_model_cards,
    read_embeddings,
    read_manifest,
)
from .errors import ConfigurationError, HistobenchError, PlanningError
from .expression import RegressionTask, run_hest_fold
from .metrics import RunResult, balanced_accuracy, select_token_variant
from .mil import ABMILClassifier, build_bags
from .probe import GridSearchLogisticRegression, LinearProbeClassifier
from .registry import Registry, TaskSpec
from .reporting import build_table, figure_scatter_csv, group_and_overall_averages, render_report
from .splits import (
    SeedBundle,
    derive_seeds,
    patient_kfold,
    predefined_split,
    stratified_random_split,
    tcga_uniform_folds,
)

VARIANTS = ("cls", "cls-mean")
VARIANT_ENUM = {"cls": TokenVariant.CLS, "cls-mean": TokenVariant.CLS_MEAN}
RESULT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class StorePaths:
    """Path arithmetic for the data store rooted at one directory."""

    root: Path

    def manifest(self, dataset_id: str) -> Path:
        return self.root / "manifests" / f"{dataset_id}.csv"

    def embedding(self, dataset_id: str, model_id: str, token: str) -> Path:
        return self.root / "embeddings" / dataset_id / model_id / f"{token}.pemb"

    def result(self, cache_key: str) -> Path:
        return self.root / "results" / f"{cache_key}.json"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def model_cards(self) -> Path:
        return self.root / "model_cards.json"


def write_atomic(path: Path, text: str) -> None:
    """Write via a sibling temp file and rename; readers never see partials."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass(frozen=True)
class RunCell:
    """One unit of work: a single replicate of one evaluation."""

    task_id: str
    model_id: str
    variant: str
    replicate: int
    seeds: SeedBundle
    cache_key: str


@dataclass
class RunPlan:
    registry_id: str
    master_seed: int
    cells: list
    cached: set

    @property
    def runnable(self) -> list:
        return [cell for cell in self.cells if cell.cache_key not in self.cached]


def cell_cache_key(
    spec: TaskSpec,
    model_id: str,
    variant: str,
    replicate: int,
    seeds: SeedBundle,
    manifest_digest: str,
    embedding_digests: dict,
) -> str:
    doc = {
        "format": RESULT_FORMAT_VERSION,
        "task": json.loads(spec.canonical_json()),
        "model_id": model_id,
        "variant": variant,
        "replicate": replicate,
        "seeds": [seeds.master_seed, seeds.split_seed, seeds.shuffle_seed, seeds.init_seed],
        "manifest": manifest_digest,
        "embeddings": embedding_digests,
    }
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _tokens_for(variant: str) -> tuple:
    return ("cls",) if variant == "cls" else ("cls", "mean")


def _replicate_count(spec: TaskSpec, store: StorePaths, manifest_cache: dict) -> int:
    if spec.replicate_policy == "seeds":
        return spec.n_seeds
    if spec.split_strategy == "patient-kfold":
        manifest = _manifest_of(spec, store, manifest_cache)
        return len(set(manifest.patient_ids))
    if spec.split_strategy == "tcga-uniform":
        return spec.split_params.get("n_folds", 5)
    # per-fold over a single-fold strategy degenerates to one replicate
    return 1


def _manifest_of(spec: TaskSpec, store: StorePaths, cache: dict):
    if spec.dataset_id not in cache:
        kind = "slide-classification" if spec.protocol == "abmil" else None
        cache[spec.dataset_id] = read_manifest(
            store.manifest(spec.dataset_id), spec.dataset_id, task_kind=kind
        )
    return cache[spec.dataset_id]


def plan_runs(
    registry: Registry,
    models,
    variants,
    store: StorePaths,
    master_seed: int = 0,
    tasks=None,
) -> RunPlan:
    """Expand the cross product into cells and mark already-cached ones.

    Every required input file is checked up front; a single PlanningError
    lists every missing path so one pass reveals the full gap set.
    """
    models = list(models)
    if not models:
        raise ConfigurationError("no models requested")
    if len(set(models)) != len(models):
        raise ConfigurationError("duplicate model in request")
    variants = list(variants)
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {variant!r}, expected one of {VARIANTS}"
            )
    if not variants:
        raise ConfigurationError("no token variants requested")

    selected = list(registry.tasks)
    if tasks is not None:
        wanted = list(tasks)
        known = set(registry.task_ids)
        for task_id in wanted:
            if task_id not in known:
                raise ConfigurationError(f"unknown task {task_id!r} in registry "
                                         f"{registry.registry_id!r}")
        selected = [spec for spec in selected if spec.task_id in set(wanted)]

    gaps = []
    needed_tokens = sorted({t for v in variants for t in _tokens_for(v)})
    for spec in selected:
        if not store.manifest(spec.dataset_id).is_file():
            gaps.append(str(store.manifest(spec.dataset_id)))
        for model in models:
            for token in needed_tokens:
                path = store.embedding(spec.dataset_id, model, token)
                if not path.is_file():
                    gaps.append(str(path))
    if gaps:
        raise PlanningError(
            "missing inputs for the requested plan:\n" + "\n".join(gaps)
        )

    digest_cache: dict = {}

    def digest(path: Path) -> str:
        if path not in digest_cache:
            digest_cache[path] = file_digest(path)
        return digest_cache[path]

    manifest_cache: dict = {}
    cells = []
    for spec in selected:
        manifest_digest = digest(store.manifest(spec.dataset_id))
        n_replicates = _replicate_count(spec, store, manifest_cache)
        for model in models:
            for variant in variants:
                embedding_digests = {
                    token: digest(store.embedding(spec.dataset_id, model, token))
                    for token in _tokens_for(variant)
                }
                for replicate in range(n_replicates):
                    seeds = derive_seeds(
                        master_seed, f"{spec.task_id}/{model}/{variant}", replicate
                    )
                    key = cell_cache_key(
                        spec, model, variant, replicate, seeds,
                        manifest_digest, embedding_digests,
                    )
                    cells.append(
                        RunCell(
                            task_id=spec.task_id,
                            model_id=model,
                            variant=variant,
                            replicate=replicate,
                            seeds=seeds,
                            cache_key=key,
                        )
                    )
    keys = [cell.cache_key for cell in cells]
    if len(set(keys)) != len(keys):
        raise PlanningError("cache key collision inside one plan")
    cached = {key for key in keys if store.result(key).is_file()}
    return RunPlan(
        registry_id=registry.registry_id,
        master_seed=master_seed,
        cells=cells,
        cached=cached,
    )


def _load_bound(spec: TaskSpec, model_id: str, variant: str, store: StorePaths):
    manifest = _manifest_of(spec, store, {})
    cls = read_embeddings(
        store.embedding(spec.dataset_id, model_id, "cls"), model_id, spec.dataset_id
    )
    if variant == "cls":
        matrix = cls
    else:
        mean = read_embeddings(
            store.embedding(spec.dataset_id, model_id, "mean"), model_id, spec.dataset_id
        )
        matrix = concat_cls_mean(cls, mean)
    return join_manifest(matrix, manifest)


def _grid_from(hyper: dict) -> tuple:
    lo = hyper["grid_min_exp"]
    hi = hyper["grid_max_exp"]
    points = hyper["grid_points"]
    span = hi - lo
    return tuple(10.0 ** (lo + span * k / (points - 1)) for k in range(points))


def _single_fold(spec: TaskSpec, bound, task_split_seed: int):
    if spec.split_strategy == "predefined":
        return predefined_split(bound).folds[0]
    if spec.split_strategy == "stratified-random":
        fractions = tuple(spec.split_params["fractions"])
        return stratified_random_split(bound, fractions, task_split_seed).folds[0]
    raise ConfigurationError(
        f"{spec.task_id}: protocol {spec.protocol!r} cannot run on "
        f"split strategy {spec.split_strategy!r}"
    )


def _run_eva_lp(spec, bound, cell, task_split_seed):
    fold = _single_fold(spec, bound, task_split_seed)
    hyper = spec.hyperparameters
    probe = LinearProbeClassifier(
        batch_size=hyper["batch_size"],
        total_iters=hyper["total_iters"],
        base_lr=hyper["base_lr"],
        eval_every=hyper["eval_every"],
        seeds=cell.seeds,
    )
    kwargs = {}
    if fold.val_ids:
        kwargs = {
            "X_val": bound.rows(fold.val_ids),
            "y_val": bound.label_vector(fold.val_ids),
        }
    probe.fit(bound.rows(fold.train_ids), bound.label_vector(fold.train_ids), **kwargs)
    score = balanced_accuracy(
        probe.predict(bound.rows(fold.test_ids)), bound.label_vector(fold.test_ids)
    )
    return score, {"best_checkpoint_iter": probe.best_checkpoint_iter_}


def _run_internal_lr(spec, bound, cell, task_split_seed):
    hyper = spec.hyperparameters
    if spec.split_strategy == "tcga-uniform":
        plan = tcga_uniform_folds(
            bound,
            per_class=spec.split_params.get("per_class", 100),
            n_folds=spec.split_params.get("n_folds", 5),
            seed=task_split_seed,
        )
        fold = plan.folds[cell.replicate]
    else:
        fold = _single_fold(spec, bound, task_split_seed)
    model = GridSearchLogisticRegression(
        grid=_grid_from(hyper), cv_folds=hyper["cv_folds"], seeds=cell.seeds
    )
    model.fit(bound.rows(fold.train_ids), bound.label_vector(fold.train_ids))
    score = balanced_accuracy(
        model.predict(bound.rows(fold.test_ids)), bound.label_vector(fold.test_ids)
    )
    return score, {
        "chosen_penalty": model.chosen_penalty_,
        "cv_folds_used": model.n_folds_used_,
    }


def _run_abmil(spec, bound, cell, task_split_seed):
    hyper = spec.hyperparameters
    # instance subsampling must pick the same rows for every model/variant,
    # so the cap rng is task-scoped, not cell-scoped
    bags = build_bags(bound, cap=hyper["instance_cap"], seed=task_split_seed)
    part_of = {}
    for slide, part in zip(bound.slide_ids, bound.splits):
        seen = part_of.setdefault(slide, part)
        if seen != part:
            raise ConfigurationError(
                f"{spec.task_id}: slide {slide!r} spans parts {seen!r} and {part!r}"
            )
    groups = {"train": [], "val": [], "test": []}
    for bag in bags:
        part = part_of[bag.slide_id]
        if part == "none":
            raise ConfigurationError(
                f"{spec.task_id}: slide {bag.slide_id!r} lacks a split tag"
            )
        groups[part].append(bag)
    if not groups["train"] or not groups["test"]:
        raise ConfigurationError(f"{spec.task_id}: need train and test slides")
    head = ABMILClassifier(
        batch_slides=hyper["batch_slides"],
        total_iters=hyper["total_iters"],
        base_lr=hyper["base_lr"],
        hidden_dim=hyper["hidden_dim"],
        weight_decay=hyper["weight_decay"],
        eval_every=hyper["eval_every"],
        seeds=cell.seeds,
    )
    head.fit(groups["train"], groups["val"] or None)
    labels = np.array([bag.label for bag in groups["test"]])
    score = balanced_accuracy(head.predict(groups["test"]), labels)
    return score, {"best_checkpoint_iter": head.best_checkpoint_iter_}


def _run_ridge_pca(spec, bound, cell, task_split_seed):
    if spec.split_strategy != "patient-kfold":
        raise ConfigurationError(
            f"{spec.task_id}: ridge-pca expects patient-kfold, got "
            f"{spec.split_strategy!r}"
        )
    plan = patient_kfold(bound)
    if cell.replicate >= len(plan.folds):
        raise ConfigurationError(
            f"{spec.task_id}: replicate {cell.replicate} but only "
            f"{len(plan.folds)} patient folds"
        )
    fold = plan.folds[cell.replicate]
    hyper = spec.hyperparameters
    cfg = RegressionTask(
        task_id=spec.task_id,
        ridge_alpha=hyper["ridge_alpha"],
        pca_factors=hyper["pca_factors"],
    )
    result = run_hest_fold(
        bound.rows(fold.train_ids),
        bound.target_matrix(fold.train_ids),
        bound.rows(fold.test_ids),
        bound.target_matrix(fold.test_ids),
        cfg,
        fold_id=cell.replicate,
    )
    return result.mean_r, {"excluded_genes": list(result.excluded)}


_PROTOCOL_RUNNERS = {
    "eva-lp": _run_eva_lp,
    "internal-lr": _run_internal_lr,
    "abmil": _run_abmil,
    "ridge-pca": _run_ridge_pca,
}


def run_cell(args) -> dict:
    """Execute one cell; exceptions become an error record, never a crash."""
    cell, spec, root, master_seed = args
    try:
        store = StorePaths(Path(root))
        bound = _load_bound(spec, cell.model_id, cell.variant, store)
        task_split_seed = derive_seeds(master_seed, spec.task_id, 0).split_seed
        score, details = _PROTOCOL_RUNNERS[spec.protocol](
            spec, bound, cell, task_split_seed
        )
        return {
            "cache_key": cell.cache_key,
            "task_id": cell.task_id,
            "model_id": cell.model_id,
            "variant": cell.variant,
            "replicate": cell.replicate,
            "metric": spec.metric,
            "score": float(score),
            "details": details,
            "format": RESULT_FORMAT_VERSION,
        }
    except Exception as exc:  # noqa: BLE001 - cell isolation boundary
        return {
            "cache_key": cell.cache_key,
            "task_id": cell.task_id,
            "model_id": cell.model_id,
            "variant": cell.variant,
            "replicate": cell.replicate,
            "error": f"{type(exc).__name__}: {exc}",
        }


@dataclass
class ExecutionReport:
    completed: list
    cached: list
    failed: dict

    @property
    def ok(self) -> bool:
        return not self.failed


def execute(
    plan: RunPlan, registry: Registry, store: StorePaths, parallelism: int = 1
) -> ExecutionReport:
    """Run every uncached cell; workers compute, the orchestrator persists.

    A failing cell is recorded under its cache key and the rest of the suite
    continues. Identical results are produced at any parallelism degree.
    """
    if parallelism < 1:
        raise ConfigurationError(f"parallelism must be >= 1, got {parallelism}")
    spec_of = {spec.task_id: spec for spec in registry.tasks}
    runnable = plan.runnable
    payloads = [
        (cell, spec_of[cell.task_id], str(store.root), plan.master_seed)
        for cell in runnable
    ]
    if parallelism == 1 or len(payloads) <= 1:
        outcomes = [run_cell(payload) for payload in payloads]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(run_cell, payloads))

    completed, failed = [], {}
    for outcome in outcomes:
        key = outcome["cache_key"]
        if "error" in outcome:
            failed[key] = outcome["error"]
            continue
        write_atomic(
            store.result(key), json.dumps(outcome, sort_keys=True, indent=2) + "\n"
        )
        completed.append(key)
    return ExecutionReport(
        completed=completed, cached=sorted(plan.cached), failed=failed
    )


def collect_results(plan: RunPlan, store: StorePaths) -> list:
    """Read every cell's persisted result, in deterministic cell order."""
    docs, missing = [], []
    for cell in plan.cells:
        path = store.result(cell.cache_key)
        if not path.is_file():
            missing.append(
                f"{cell.task_id}/{cell.model_id}/{cell.variant}#{cell.replicate}"
            )
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("cache_key") != cell.cache_key:
            raise ConfigurationError(f"{path}: cache key mismatch")
        docs.append(doc)
    if missing:
        raise ConfigurationError(
            "results missing for cells:\n" + "\n".join(missing)
        )
    return docs


def aggregate_results(docs) -> dict:
    """Fold per-cell scores into RunResults keyed (task, model, variant)."""
    groups: dict = {}
    for doc in docs:
        key = (doc["task_id"], doc["model_id"], doc["variant"])
        groups.setdefault(key, []).append(doc)
    results = {}
    for key, cell_docs in groups.items():
        cell_docs.sort(key=lambda d: d["replicate"])
        replicates = [d["replicate"] for d in cell_docs]
        if replicates != list(range(len(replicates))):
            raise ConfigurationError(f"replicate gap for {key}: {replicates}")
        task_id, model_id, variant = key
        results[key] = RunResult.from_values(
            task_id,
            model_id,
            VARIANT_ENUM[variant],
            cell_docs[0]["metric"],
            [d["score"] for d in cell_docs],
        )
    return results


def max_variant_results(results: dict) -> tuple:
    """Per (task, model), the better variant's RunResult plus which one won."""
    pairs = sorted({(t, m) for (t, m, _) in results})
    winners, chosen = {}, {}
    for task_id, model_id in pairs:
        cls = results.get((task_id, model_id, "cls"))
        cls_mean = results.get((task_id, model_id, "cls-mean"))
        if cls is None or cls_mean is None:
            have = cls or cls_mean
            if have is None:
                raise ConfigurationError(f"no results for ({task_id}, {model_id})")
            winners[(task_id, model_id)] = have
            chosen[(task_id, model_id)] = have.variant
            continue
        best, variant = select_token_variant(cls, cls_mean)
        winners[(task_id, model_id)] = best
        chosen[(task_id, model_id)] = variant
    return winners, chosen


def write_reports(
    plan: RunPlan,
    registry: Registry,
    store: StorePaths,
    fmt: str = "markdown",
    dispersion: str = "std",
) -> list:
    """Render the per-variant and max tables from persisted results.

    Returns the list of written paths. Output bytes are a pure function of
    the persisted results, so regeneration is idempotent.
    """
    docs = collect_results(plan, store)
    results = aggregate_results(docs)
    task_ids = []
    for cell in plan.cells:
        if cell.task_id not in task_ids:
            task_ids.append(cell.task_id)
    task_groups = {
        spec.task_id: spec.group for spec in registry.tasks if spec.task_id in task_ids
    }
    models = []
    for cell in plan.cells:
        if cell.model_id not in models:
            models.append(cell.model_id)
    variants_present = sorted({v for (_, _, v) in results})

    ext = {"markdown": "md", "csv": "csv", "latex": "tex"}.get(fmt)
    if ext is None:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    store.reports_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, table) -> None:
        text = render_report(table, fmt=fmt, show_spread=True)
        path = store.reports_dir / f"{name}.{ext}"
        write_atomic(path, text)
        written.append(path)

    notes = (
        f"registry {registry.registry_id}, master seed {plan.master_seed}",
    )
    for variant in variants_present:
        subset = [
            results[key] for key in sorted(results) if key[2] == variant
        ]
        table = build_table(
            subset,
            task_groups,
            model_order=models,
            task_order=task_ids,
            dispersion=dispersion,
            header_notes=notes + (f"token variant: {variant}",),
        )
        emit(f"report_{variant.replace('-', '_')}", table)

    if set(variants_present) == set(VARIANTS):
        winners, _ = max_variant_results(results)
        table = build_table(
            [winners[key] for key in sorted(winners)],
            task_groups,
            model_order=models,
            task_order=task_ids,
            dispersion=dispersion,
            header_notes=notes + ("token variant: best of cls and cls-mean",),
        )
        emit("report_max", table)
        if store.model_cards.is_file():
            cards = load_model_cards(store.model_cards)
            if all(model in cards for model in models):
                overall = group_and_overall_averages(table)["overall"]
                path = store.reports_dir / "scatter.csv"
                write_atomic(path, figure_scatter_csv(cards, overall))
                written.append(path)
    return written
