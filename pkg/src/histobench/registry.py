"""Declarative task registry: which protocol, split, and constants per task.

All protocol constants live in the registry document, not in code, so any
deviation from the shipped defaults is visible in a config diff. A registry
is a single JSON file with shared per-protocol defaults and a task list;
each task resolves to a TaskSpec with the defaults merged under any
task-local overrides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

REGISTRY_DIR = Path(__file__).parent / "registry"

PROTOCOLS = ("eva-lp", "internal-lr", "abmil", "ridge-pca")
PROTOCOL_METRIC = {
    "eva-lp": "balanced-accuracy",
    "internal-lr": "balanced-accuracy",
    "abmil": "balanced-accuracy",
    "ridge-pca": "pearson-mean",
}
SPLIT_STRATEGIES = ("predefined", "patient-kfold", "tcga-uniform", "stratified-random")
GROUPS = ("molecular", "morphology")


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark task, fully resolved."""

    task_id: str
    display_name: str
    group: str
    protocol: str
    metric: str
    dataset_id: str
    split_strategy: str
    split_params: dict = field(default_factory=dict)
    replicate_policy: str = "seeds"
    n_seeds: int = 5
    hyperparameters: dict = field(default_factory=dict)

    def canonical_json(self) -> str:
        """Stable serialization used in cache keys."""
        return json.dumps(
            {
                "task_id": self.task_id,
                "group": self.group,
                "protocol": self.protocol,
                "metric": self.metric,
                "dataset_id": self.dataset_id,
                "split_strategy": self.split_strategy,
                "split_params": self.split_params,
                "replicate_policy": self.replicate_policy,
                "n_seeds": self.n_seeds,
                "hyperparameters": self.hyperparameters,
            },
            sort_keys=True,
        )


@dataclass
class Registry:
    registry_id: str
    tasks: list
    protocol_defaults: dict

    def task(self, task_id: str) -> TaskSpec:
        for spec in self.tasks:
            if spec.task_id == task_id:
                return spec
        raise ConfigurationError(f"no task {task_id!r} in registry {self.registry_id!r}")

    @property
    def task_ids(self) -> list:
        return [spec.task_id for spec in self.tasks]


def _require(entry: dict, key: str, path: str):
    if key not in entry:
        raise ConfigurationError(f"{path}.{key}: missing required field")
    return entry[key]


def _validate_split(strategy: str, params: dict, path: str):
    if strategy not in SPLIT_STRATEGIES:
        raise ConfigurationError(
            f"{path}.split.strategy: unknown strategy {strategy!r}, "
            f"expected one of {SPLIT_STRATEGIES}"
        )
    if strategy == "tcga-uniform":
        per_class = params.get("per_class", 100)
        n_folds = params.get("n_folds", 5)
        if not (isinstance(per_class, int) and per_class > 0):
            raise ConfigurationError(f"{path}.split.per_class: must be a positive integer")
        if not (isinstance(n_folds, int) and n_folds >= 2):
            raise ConfigurationError(f"{path}.split.n_folds: must be an integer >= 2")
    if strategy == "stratified-random":
        fractions = params.get("fractions")
        if (
            not isinstance(fractions, (list, tuple))
            or len(fractions) != 3
            or abs(sum(fractions) - 1.0) > 1e-9
        ):
            raise ConfigurationError(
                f"{path}.split.fractions: need 3 fractions summing to 1"
            )


def parse_task(entry: dict, protocol_defaults: dict, path: str) -> TaskSpec:
    task_id = _require(entry, "task_id", path)
    protocol = _require(entry, "protocol", path)
    if protocol not in PROTOCOLS:
        raise ConfigurationError(
            f"{path}.protocol: unknown protocol {protocol!r}, expected one of {PROTOCOLS}"
        )
    metric = entry.get("metric", PROTOCOL_METRIC[protocol])
    if metric != PROTOCOL_METRIC[protocol]:
        raise ConfigurationError(
            f"{path}.metric: {metric!r} is not valid for protocol {protocol!r} "
            f"(expected {PROTOCOL_METRIC[protocol]!r})"
        )
    group = _require(entry, "group", path)
    if group not in GROUPS:
        raise ConfigurationError(
            f"{path}.group: unknown group {group!r}, expected one of {GROUPS}"
        )
    split = _require(entry, "split", path)
    strategy = _require(split, "strategy", f"{path}.split")
    split_params = {k: v for k, v in split.items() if k != "strategy"}
    _validate_split(strategy, split_params, path)

    replicates = entry.get("replicates", {"seeds": 5})
    if replicates == "per-fold":
        policy, n_seeds = "per-fold", 0
    elif isinstance(replicates, dict) and isinstance(replicates.get("seeds"), int):
        policy, n_seeds = "seeds", replicates["seeds"]
        if n_seeds < 1:
            raise ConfigurationError(f"{path}.replicates.seeds: must be >= 1")
    else:
        raise ConfigurationError(
            f"{path}.replicates: expected 'per-fold' or {{'seeds': n}}, got {replicates!r}"
        )

    hyper = dict(protocol_defaults.get(protocol, {}))
    hyper.update(entry.get("hyperparameters", {}))
    return TaskSpec(
        task_id=task_id,
        display_name=entry.get("display_name", task_id),
        group=group,
        protocol=protocol,
        metric=metric,
        dataset_id=entry.get("dataset_id", task_id),
        split_strategy=strategy,
        split_params=split_params,
        replicate_policy=policy,
        n_seeds=n_seeds,
        hyperparameters=hyper,
    )


def load_registry(path: str | Path) -> Registry:
    """Read and validate a registry document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tasks"), list):
        raise ConfigurationError(f"{path}: expected an object with a 'tasks' list")
    defaults = doc.get("protocol_defaults", {})
    tasks = []
    seen = set()
    for i, entry in enumerate(doc["tasks"]):
        spec = parse_task(entry, defaults, f"tasks[{i}]")
        if spec.task_id in seen:
            raise ConfigurationError(f"tasks[{i}].task_id: duplicate {spec.task_id!r}")
        seen.add(spec.task_id)
        tasks.append(spec)
    return Registry(
        registry_id=doc.get("registry_id", path.stem),
        tasks=tasks,
        protocol_defaults=defaults,
    )


def default_registry() -> Registry:
    return load_registry(REGISTRY_DIR / "default.json")


def synthetic_registry() -> Registry:
    return load_registry(REGISTRY_DIR / "synthetic.json")
