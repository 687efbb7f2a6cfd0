"""Comparison tables: aggregation, ranking marks, and report rendering.

Table cells hold percentage points (metric value x 100), matching the
display convention of the score tables this module reproduces. Group and
overall averages are computed from unrounded cell means; ranking marks are
computed on the rounded one-decimal display values, so models that display
the same value share a mark.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import ModelCard
from .errors import ConfigurationError, ContractViolation
from .metrics import RunResult, display_round

FIXTURES_DIR = Path(__file__).parent / "fixtures"
GROUPS = ("molecular", "morphology")
GROUP_LABELS = {"molecular": "Molecular average", "morphology": "Morphology average"}
_FORMATS = ("markdown", "csv", "latex")


@dataclass(frozen=True)
class Cell:
    mean: float
    spread: float


@dataclass
class ReportTable:
    """Task x model score grid with group tags and header notes."""

    models: tuple
    tasks: tuple
    groups: dict
    cells: dict
    dispersion: str = "std"
    header_notes: tuple = ()

    def __post_init__(self):
        if len(self.models) < 1 or len(self.tasks) < 1:
            raise ContractViolation("table needs at least one model and one task")
        if self.dispersion not in ("std", "stderr"):
            raise ContractViolation(f"unknown dispersion {self.dispersion!r}")
        for task in self.tasks:
            for model in self.models:
                if (task, model) not in self.cells:
                    raise ConfigurationError(f"missing cell ({task!r}, {model!r})")

    def value(self, task: str, model: str) -> float:
        return self.cells[(task, model)].mean


def build_table(
    results,
    task_groups: dict,
    model_order=None,
    task_order=None,
    dispersion: str = "std",
    header_notes=(),
) -> ReportTable:
    """Arrange RunResults into a full grid, scaling metric values to points.

    Every (task, model) pair of the implied grid must be present exactly
    once; the spread column is the sample std or the standard error of the
    replicates depending on `dispersion`.
    """
    cells = {}
    models_seen, tasks_seen = [], []
    for result in results:
        key = (result.task_id, result.model_id)
        if key in cells:
            raise ConfigurationError(f"duplicate result for {key}")
        spread = result.std if dispersion == "std" else result.stderr
        cells[key] = Cell(result.mean * 100.0, spread * 100.0)
        if result.model_id not in models_seen:
            models_seen.append(result.model_id)
        if result.task_id not in tasks_seen:
            tasks_seen.append(result.task_id)
    models = tuple(model_order) if model_order else tuple(models_seen)
    tasks = tuple(task_order) if task_order else tuple(tasks_seen)
    return ReportTable(
        models=models,
        tasks=tasks,
        groups=dict(task_groups),
        cells=cells,
        dispersion=dispersion,
        header_notes=tuple(header_notes),
    )


def group_and_overall_averages(table: ReportTable) -> dict:
    """Unrounded per-model means for each group and over all tasks."""
    for task in table.tasks:
        group = table.groups.get(task)
        if group not in GROUPS:
            raise ConfigurationError(f"task {task!r} has no valid group tag: {group!r}")
    averages = {scope: {} for scope in (*GROUPS, "overall")}
    for model in table.models:
        by_group = {g: [] for g in GROUPS}
        for task in table.tasks:
            by_group[table.groups[task]].append(table.value(task, model))
        everything = []
        for group in GROUPS:
            values = by_group[group]
            if values:
                averages[group][model] = float(np.mean(values))
            everything.extend(values)
        averages["overall"][model] = float(np.mean(everything))
    return averages


def rank_values(values: dict) -> dict:
    """Bold/underline marks over one row, on displayed (rounded) values.

    All models tied at the top displayed value are bold; all models at the
    next distinct displayed value are underlined.
    """
    if len(values) < 2:
        raise ContractViolation("ranking needs >= 2 models")
    displayed = {model: display_round(v) for model, v in values.items()}
    best = max(displayed.values())
    runner_up = max((v for v in displayed.values() if v < best), default=None)
    marks = {}
    for model, v in displayed.items():
        if v == best:
            marks[model] = "bold"
        elif runner_up is not None and v == runner_up:
            marks[model] = "underline"
        else:
            marks[model] = "none"
    return marks


def rank_rows(table: ReportTable) -> dict:
    """Per-task ranking marks: {task_id: {model_id: mark}}."""
    return {
        task: rank_values({m: table.value(task, m) for m in table.models})
        for task in table.tasks
    }


def _format_value(value: float) -> str:
    return f"{display_round(value):.1f}"


def _marked(text: str, mark: str, fmt: str) -> str:
    if mark == "bold":
        return {"markdown": f"**{text}**", "latex": f"\\textbf{{{text}}}"}[fmt]
    if mark == "underline":
        return {"markdown": f"<u>{text}</u>", "latex": f"\\underline{{{text}}}"}[fmt]
    return text


def _dispersion_note(table: ReportTable) -> str:
    if table.dispersion == "std":
        return "dispersion: sample standard deviation over replicates (ddof=1)"
    return "dispersion: standard error of the mean over replicates"


def _human_rows(table: ReportTable, show_spread: bool, fmt: str):
    """Shared row assembly for the markdown and latex renderers."""
    marks = rank_rows(table)
    averages = group_and_overall_averages(table)
    rows = []
    for group in GROUPS:
        tasks = [t for t in table.tasks if table.groups[t] == group]
        for task in tasks:
            line = [group, task]
            for model in table.models:
                cell = table.cells[(task, model)]
                text = _format_value(cell.mean)
                text = _marked(text, marks[task][model], fmt)
                if show_spread:
                    pm = "\\pm" if fmt == "latex" else "±"
                    text = f"{text} {pm}{_format_value(cell.spread)}"
                line.append(text)
            rows.append(line)
        if tasks:
            avg_marks = rank_values(averages[group])
            line = ["", GROUP_LABELS[group]]
            for model in table.models:
                text = _format_value(averages[group][model])
                line.append(_marked(text, avg_marks[model], fmt))
            rows.append(line)
    overall_marks = rank_values(averages["overall"])
    line = ["", "Overall average"]
    for model in table.models:
        text = _format_value(averages["overall"][model])
        line.append(_marked(text, overall_marks[model], fmt))
    rows.append(line)
    return rows


def render_report(table: ReportTable, fmt: str = "markdown", show_spread: bool = False) -> str:
    """Render the table to deterministic text in the requested format.

    The csv format is machine-oriented: full-precision means with mark and
    group columns, prefixed by '#' note lines. markdown and latex show
    one-decimal cells with bold/underline ranking marks.
    """
    if fmt not in _FORMATS:
        raise ConfigurationError(f"unknown report format {fmt!r}; pick from {_FORMATS}")
    notes = [_dispersion_note(table), *table.header_notes]

    if fmt == "csv":
        buffer = io.StringIO()
        for note in notes:
            buffer.write(f"# {note}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["task_id", "group", "model_id", "mean", "std", "mark"])
        marks = rank_rows(table)
        for task in table.tasks:
            for model in table.models:
                cell = table.cells[(task, model)]
                writer.writerow(
                    [task, table.groups[task], model,
                     repr(float(cell.mean)), repr(float(cell.spread)),
                     marks[task][model]]
                )
        return buffer.getvalue()

    rows = _human_rows(table, show_spread, fmt)
    if fmt == "markdown":
        lines = ["# Benchmark results", ""]
        lines += [f"_{note}_" for note in notes]
        lines.append("")
        header = ["Group", "Task", *table.models]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in rows:
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"

    lines = [f"% {note}" for note in notes]
    lines.append("\\begin{tabular}{ll" + "r" * len(table.models) + "}")
    lines.append("Group & Task & " + " & ".join(table.models) + " \\\\")
    lines.append("\\midrule")
    for row in rows:
        lines.append(" & ".join(row) + " \\\\")
    lines.append("\\end{tabular}")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> ReportTable:
    """Re-read a csv render into a table (inverse of render_report csv)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    cells, groups = {}, {}
    models, tasks = [], []
    for record in reader:
        task, model = record["task_id"], record["model_id"]
        cells[(task, model)] = Cell(float(record["mean"]), float(record["std"]))
        groups[task] = record["group"]
        if model not in models:
            models.append(model)
        if task not in tasks:
            tasks.append(task)
    return ReportTable(
        models=tuple(models), tasks=tuple(tasks), groups=groups, cells=cells
    )


def figure_scatter_csv(cards: dict, overall: dict) -> str:
    """Model-size/data-size/performance scatter rows, one per model."""
    lines = ["model_id,parameter_count,training_slides,overall_average"]
    for model_id in sorted(overall):
        if model_id not in cards:
            raise ConfigurationError(f"no model card for {model_id!r}")
        card: ModelCard = cards[model_id]
        lines.append(
            f"{model_id},{card.parameter_count},{card.training_slides},"
            f"{_format_value(overall[model_id])}"
        )
    return "\n".join(lines) + "\n"


def load_reference_table(variant: str) -> tuple[ReportTable, dict]:
    """Load a shipped reference score table and its printed ranking marks.

    variant is one of 'max', 'cls', 'cls_mean'. Returns (table, marks) where
    marks[task][model] is the mark printed in the reference source; these
    fixtures feed the aggregation/ranking self-checks, they are not harness
    output.
    """
    if variant not in ("max", "cls", "cls_mean"):
        raise ConfigurationError(f"unknown reference variant {variant!r}")
    path = FIXTURES_DIR / f"reference_scores_{variant}.csv"
    cells, groups, marks = {}, {}, {}
    models, tasks = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            task, model = record["task_id"], record["model_id"]
            cells[(task, model)] = Cell(float(record["mean"]), float(record["std"]))
            groups[task] = record["group"]
            marks.setdefault(task, {})[model] = record["mark"]
            if model not in models:
                models.append(model)
            if task not in tasks:
                tasks.append(task)
    table = ReportTable(
        models=tuple(models), tasks=tuple(tasks), groups=groups, cells=cells
    )
    return table, marks


def load_reference_averages() -> dict:
    """Printed averages: {(variant, scope, model_id): value}."""
    out = {}
    with open(FIXTURES_DIR / "reference_averages.csv", newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            out[(record["variant"], record["scope"], record["model_id"])] = float(
                record["value"]
            )
    return out


def fixture_check(tolerance: float = 0.06) -> list:
    """Self-check: aggregation and ranking reproduce the reference tables.

    Returns a list of failure messages; empty means everything passed.
    Checks every variant's recomputed group/overall averages against the
    printed values (within `tolerance`, display-rounding slack) and, for the
    max-variant table, that bold marks match exactly and underline marks
    cover the printed ones with extras only at equal displayed values.
    """
    failures = []
    printed_averages = load_reference_averages()
    for variant in ("max", "cls", "cls_mean"):
        table, printed_marks = load_reference_table(variant)
        averages = group_and_overall_averages(table)
        for (var, scope, model), printed in printed_averages.items():
            if var != variant:
                continue
            got = averages[scope][model]
            if abs(got - printed) > tolerance:
                failures.append(
                    f"{variant}/{scope}/{model}: recomputed {got:.3f} vs printed {printed}"
                )
        if variant != "max":
            continue
        computed = rank_rows(table)
        for task in table.tasks:
            printed_bold = {m for m, mk in printed_marks[task].items() if mk == "bold"}
            got_bold = {m for m, mk in computed[task].items() if mk == "bold"}
            if printed_bold != got_bold:
                failures.append(f"max/{task}: bold {got_bold} vs printed {printed_bold}")
            printed_under = {
                m for m, mk in printed_marks[task].items() if mk == "underline"
            }
            got_under = {m for m, mk in computed[task].items() if mk == "underline"}
            if not printed_under <= got_under:
                failures.append(
                    f"max/{task}: underline {got_under} misses printed {printed_under}"
                )
            elif got_under - printed_under:
                displayed = {
                    m: display_round(table.value(task, m)) for m in table.models
                }
                anchor = {displayed[m] for m in printed_under}
                for extra in got_under - printed_under:
                    if {displayed[extra]} != anchor:
                        failures.append(
                            f"max/{task}: extra underline {extra} at a different value"
                        )
    return failures
