"""Command-line interface: import, plan, run, report, synth, fixture-check.

Exit codes: 0 on success, 1 when benchmark cells fail or the fixture check
finds mismatches, 2 for configuration and validation errors. The data store
root comes from --data-root, falling back to the HISTOBENCH_ROOT environment
variable, then ./histobench-data.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .embeddings import (
    concat_cls_mean,
    join_manifest,
    read_embeddings,
    read_manifest,
    write_embeddings,
    write_manifest,
)
from .errors import HistobenchError
from .registry import REGISTRY_DIR, load_registry
from .runner import StorePaths, execute, plan_runs, write_reports
from .synth import DEFAULT_SUITE, generate_suite, load_suite_spec, synth_generate

DEFAULT_ROOT = "./histobench-data"
ROOT_ENV_VAR = "HISTOBENCH_ROOT"


def resolve_root(value: str | None) -> StorePaths:
    root = value or os.environ.get(ROOT_ENV_VAR) or DEFAULT_ROOT
    return StorePaths(Path(root))


def resolve_registry(value: str):
    if value in ("default", "synthetic"):
        return load_registry(REGISTRY_DIR / f"{value}.json")
    return load_registry(value)


def _split_list(text: str | None):
    if text is None:
        return None
    items = [part.strip() for part in text.split(",") if part.strip()]
    return items or None


def cmd_import(args) -> int:
    store = resolve_root(args.data_root)
    kind = "slide-classification" if args.slide_level else None
    manifest = read_manifest(args.manifest, args.dataset_id, task_kind=kind)
    cls = read_embeddings(args.cls, args.model, args.dataset_id)
    matrices = {"cls": cls}
    if args.mean:
        mean = read_embeddings(args.mean, args.model, args.dataset_id)
        concat_cls_mean(cls, mean)  # alignment and dim checks
        matrices["mean"] = mean
    for matrix in matrices.values():
        join_manifest(matrix, manifest)

    manifest_path = store.manifest(args.dataset_id)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, manifest_path)
    for token, matrix in matrices.items():
        path = store.embedding(args.dataset_id, args.model, token)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_embeddings(matrix, path)
    print(
        f"imported {args.dataset_id}: {manifest.n_items} items, "
        f"model {args.model}, tokens {', '.join(sorted(matrices))}"
    )
    return 0


def _plan_from_args(args, store):
    registry = resolve_registry(args.registry)
    models = _split_list(args.models)
    if not models:
        raise HistobenchError("--models is required (comma-separated ids)")
    variants = _split_list(args.variants) or ["cls", "cls-mean"]
    tasks = _split_list(args.tasks)
    plan = plan_runs(
        registry, models, variants, store, master_seed=args.seed, tasks=tasks
    )
    return registry, plan


def cmd_plan(args) -> int:
    store = resolve_root(args.data_root)
    registry, plan = _plan_from_args(args, store)
    runnable = len(plan.runnable)
    print(
        f"plan: {len(plan.cells)} cells "
        f"({len(plan.cached)} cached, {runnable} to run)"
    )
    for cell in plan.cells:
        state = "cached" if cell.cache_key in plan.cached else "pending"
        print(
            f"  {cell.task_id} {cell.model_id} {cell.variant} "
            f"replicate {cell.replicate}: {state}"
        )
    return 0


def cmd_run(args) -> int:
    store = resolve_root(args.data_root)
    registry, plan = _plan_from_args(args, store)
    report = execute(plan, registry, store, parallelism=args.parallelism)
    print(
        f"executed {len(report.completed)} cells, "
        f"{len(report.cached)} cached, {len(report.failed)} failed"
    )
    if report.failed:
        for key, message in sorted(report.failed.items()):
            cell = next(c for c in plan.cells if c.cache_key == key)
            print(
                f"FAILED {cell.task_id}/{cell.model_id}/{cell.variant}"
                f"#{cell.replicate}: {message}",
                file=sys.stderr,
            )
        return 1
    written = write_reports(
        plan, registry, store, fmt=args.format, dispersion=args.dispersion
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    store = resolve_root(args.data_root)
    registry, plan = _plan_from_args(args, store)
    written = write_reports(
        plan, registry, store, fmt=args.format, dispersion=args.dispersion
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    store = resolve_root(args.data_root)
    specs = load_suite_spec(args.spec) if args.spec else DEFAULT_SUITE
    artifacts = generate_suite(store.root, specs)
    for art in artifacts:
        print(f"generated {art.dataset_id}: {art.manifest_path}")
    return 0


def cmd_fixture_check(args) -> int:
    from .reporting import fixture_check

    failures = fixture_check()
    if failures:
        for line in failures:
            print(f"MISMATCH {line}", file=sys.stderr)
        return 1
    print("fixture check passed: averages, bold rows, and underline rows agree")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histobench",
        description="Deterministic benchmark harness over frozen pathology embeddings.",
    )
    parser.add_argument(
        "--data-root",
        default=None,
        help=f"store root (default: ${ROOT_ENV_VAR} or {DEFAULT_ROOT})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="validate and install embeddings + manifest")
    p_import.add_argument("--dataset-id", required=True)
    p_import.add_argument("--manifest", required=True, help="manifest CSV path")
    p_import.add_argument("--model", required=True, help="model id for the embeddings")
    p_import.add_argument("--cls", required=True, help="primary-token PEMB file")
    p_import.add_argument("--mean", default=None, help="mean-token PEMB file")
    p_import.add_argument(
        "--slide-level",
        action="store_true",
        help="treat classification labels as slide-level (bags)",
    )
    p_import.set_defaults(func=cmd_import)

    def add_plan_flags(p):
        p.add_argument("--registry", default="default",
                       help="'default', 'synthetic', or a registry JSON path")
        p.add_argument("--models", default=None, help="comma-separated model ids")
        p.add_argument("--tasks", default=None, help="comma-separated task ids (default all)")
        p.add_argument("--variants", default=None,
                       help="comma-separated from {cls, cls-mean} (default both)")
        p.add_argument("--seed", type=int, default=0, help="master seed")

    p_plan = sub.add_parser("plan", help="expand and print the run plan")
    add_plan_flags(p_plan)
    p_plan.set_defaults(func=cmd_plan)

    p_run = sub.add_parser("run", help="execute the plan and write reports")
    add_plan_flags(p_run)
    p_run.add_argument("--parallelism", type=int, default=1)
    p_run.add_argument("--format", default="markdown",
                       choices=("markdown", "csv", "latex"))
    p_run.add_argument("--dispersion", default="std", choices=("std", "stderr"))
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="re-render reports from cached results")
    add_plan_flags(p_report)
    p_report.add_argument("--format", default="markdown",
                          choices=("markdown", "csv", "latex"))
    p_report.add_argument("--dispersion", default="std", choices=("std", "stderr"))
    p_report.set_defaults(func=cmd_report)

    p_synth = sub.add_parser("synth", help="generate synthetic datasets with oracles")
    p_synth.add_argument("--spec", default=None,
                         help="JSON spec document (default: built-in suite)")
    p_synth.set_defaults(func=cmd_synth)

    p_fix = sub.add_parser(
        "fixture-check", help="verify aggregation and ranking against the shipped fixture"
    )
    p_fix.set_defaults(func=cmd_fixture_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HistobenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
