"""Aggregation, ranking, and rendering against the shipped reference tables."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histobench.embeddings import load_model_cards
from histobench.errors import ConfigurationError, ContractViolation
from histobench.metrics import RunResult, TokenVariant, display_round, select_token_variant
from histobench.reporting import (
    FIXTURES_DIR,
    ReportTable,
    Cell,
    build_table,
    figure_scatter_csv,
    fixture_check,
    group_and_overall_averages,
    load_reference_averages,
    load_reference_table,
    parse_report_csv,
    rank_rows,
    rank_values,
    render_report,
)

MAX_TABLE, MAX_MARKS = load_reference_table("max")
CLS_TABLE, _ = load_reference_table("cls")
CM_TABLE, _ = load_reference_table("cls_mean")
PRINTED_AVERAGES = load_reference_averages()


def small_table(values, dispersion="std"):
    """values: {task: {model: mean}} with a flat molecular group tag."""
    tasks = tuple(values)
    models = tuple(next(iter(values.values())))
    cells = {
        (t, m): Cell(float(values[t][m]), 0.0) for t in tasks for m in models
    }
    return ReportTable(
        models=models, tasks=tasks,
        groups={t: "molecular" for t in tasks},
        cells=cells, dispersion=dispersion,
    )


class TestReferenceAggregation:
    def test_all_printed_averages_within_rounding_slack(self):
        for variant, table in [("max", MAX_TABLE), ("cls", CLS_TABLE), ("cls_mean", CM_TABLE)]:
            averages = group_and_overall_averages(table)
            for (var, scope, model), printed in PRINTED_AVERAGES.items():
                if var != variant:
                    continue
                assert abs(averages[scope][model] - printed) <= 0.06, (
                    variant, scope, model)

    def test_headline_column(self):
        averages = group_and_overall_averages(MAX_TABLE)
        assert display_round(averages["morphology"]["atlas"]) == 84.6
        assert display_round(averages["molecular"]["atlas"]) == 44.9
        assert display_round(averages["overall"]["atlas"]) == 61.9

    def test_overall_is_task_weighted(self):
        averages = group_and_overall_averages(MAX_TABLE)
        for model in MAX_TABLE.models:
            combined = (12 * averages["molecular"][model] + 9 * averages["morphology"][model]) / 21
            assert averages["overall"][model] == pytest.approx(combined, abs=1e-12)

    def test_untagged_task_rejected(self):
        table = small_table({"a": {"m1": 1.0, "m2": 2.0}})
        table.groups["a"] = "mystery"
        with pytest.raises(ConfigurationError, match="group"):
            group_and_overall_averages(table)

    def test_constant_cells_average_to_constant(self):
        table = small_table({"a": {"m1": 7.0, "m2": 7.0}, "b": {"m1": 7.0, "m2": 7.0}})
        averages = group_and_overall_averages(table)
        assert averages["molecular"] == {"m1": 7.0, "m2": 7.0}
        assert averages["overall"] == {"m1": 7.0, "m2": 7.0}


class TestReferenceRanking:
    def test_bold_sets_match_exactly(self):
        computed = rank_rows(MAX_TABLE)
        for task in MAX_TABLE.tasks:
            printed = {m for m, mk in MAX_MARKS[task].items() if mk == "bold"}
            got = {m for m, mk in computed[task].items() if mk == "bold"}
            assert got == printed, task

    def test_underlines_cover_printed_extras_only_at_ties(self):
        computed = rank_rows(MAX_TABLE)
        for task in MAX_TABLE.tasks:
            printed = {m for m, mk in MAX_MARKS[task].items() if mk == "underline"}
            got = {m for m, mk in computed[task].items() if mk == "underline"}
            assert printed <= got, task
            values = {m: display_round(MAX_TABLE.value(task, m)) for m in MAX_TABLE.models}
            anchor = {values[m] for m in printed}
            for extra in got - printed:
                assert {values[extra]} == anchor, (task, extra)

    def test_atlas_bold_on_11_rows(self):
        computed = rank_rows(MAX_TABLE)
        bolds = sum(1 for t in MAX_TABLE.tasks if computed[t]["atlas"] == "bold")
        assert bolds == 11

    def test_hcc_row(self):
        marks = rank_rows(MAX_TABLE)["hest-hcc"]
        assert marks["atlas"] == "bold"
        assert marks["virchow2"] == "underline"
        assert display_round(MAX_TABLE.value("hest-hcc", "atlas")) == 10.7
        assert display_round(MAX_TABLE.value("hest-hcc", "virchow2")) == 9.6

    def test_panda_shared_underline(self):
        marks = rank_rows(MAX_TABLE)["panda"]
        under = {m for m, mk in marks.items() if mk == "underline"}
        assert {"uni", "rudolfv"} <= under

    def test_two_model_row(self):
        marks = rank_values({"m1": 60.0, "m2": 50.0})
        assert marks == {"m1": "bold", "m2": "underline"}

    def test_all_tied_row_all_bold(self):
        marks = rank_values({"m1": 50.0, "m2": 50.0, "m3": 50.0})
        assert set(marks.values()) == {"bold"}

    def test_single_model_rejected(self):
        with pytest.raises(ContractViolation, match=">= 2"):
            rank_values({"only": 1.0})

    def test_fixture_check_clean(self):
        assert fixture_check() == []


class TestVariantSelectionOnReference:
    def test_selection_matches_max_table(self):
        for task in MAX_TABLE.tasks:
            metric = "pearson-mean" if task.startswith("hest") else "balanced-accuracy"
            for model in MAX_TABLE.models:
                cls = RunResult.from_values(
                    task, model, TokenVariant.CLS, metric,
                    (CLS_TABLE.value(task, model) / 100.0,))
                cm = RunResult.from_values(
                    task, model, TokenVariant.CLS_MEAN, metric,
                    (CM_TABLE.value(task, model) / 100.0,))
                chosen, _ = select_token_variant(cls, cm)
                assert chosen.mean * 100.0 == pytest.approx(
                    MAX_TABLE.value(task, model), abs=1e-9), (task, model)


class TestBuildTable:
    def results(self):
        out = []
        for task, group in [("t1", "molecular"), ("t2", "morphology")]:
            for model in ("m1", "m2"):
                values = (0.5, 0.6, 0.7) if model == "m1" else (0.4, 0.4, 0.4)
                out.append(RunResult.from_values(
                    task, model, TokenVariant.CLS, "balanced-accuracy", values))
        return out, {"t1": "molecular", "t2": "morphology"}

    def test_scales_to_points(self):
        results, groups = self.results()
        table = build_table(results, groups)
        assert table.value("t1", "m1") == pytest.approx(60.0)
        assert table.cells[("t1", "m2")].spread == pytest.approx(0.0, abs=1e-12)

    def test_stderr_dispersion(self):
        results, groups = self.results()
        table = build_table(results, groups, dispersion="stderr")
        expected = np.std([0.5, 0.6, 0.7], ddof=1) / np.sqrt(3) * 100
        assert table.cells[("t1", "m1")].spread == pytest.approx(expected)

    def test_duplicate_rejected(self):
        results, groups = self.results()
        with pytest.raises(ConfigurationError, match="duplicate"):
            build_table(results + results[:1], groups)

    def test_missing_cell_rejected(self):
        results, groups = self.results()
        with pytest.raises(ConfigurationError, match="missing cell"):
            build_table(results[:3], groups)


class TestRendering:
    def test_markdown_marks_only_on_marked_cells(self):
        text = render_report(MAX_TABLE, fmt="markdown")
        assert text.count("**") // 2 == sum(
            list(row.values()).count("bold") for row in rank_rows(MAX_TABLE).values()
        ) + 3  # one bold per average row (no average-row ties in this fixture)
        assert "<u>" in text

    def test_markdown_deterministic(self):
        assert render_report(MAX_TABLE, fmt="markdown") == render_report(
            MAX_TABLE, fmt="markdown"
        )

    def test_markdown_spread_display(self):
        text = render_report(MAX_TABLE, fmt="markdown", show_spread=True)
        assert "**10.7** ±1.9" in text

    def test_header_stamps_dispersion(self):
        std_text = render_report(MAX_TABLE, fmt="markdown")
        assert "sample standard deviation" in std_text
        stderr_table = ReportTable(
            models=MAX_TABLE.models, tasks=MAX_TABLE.tasks, groups=MAX_TABLE.groups,
            cells=MAX_TABLE.cells, dispersion="stderr",
        )
        assert "standard error" in render_report(stderr_table, fmt="markdown")

    def test_header_notes_included(self):
        table = small_table({"a": {"m1": 1.0, "m2": 2.0}})
        table.header_notes = ("ridge_alpha=1.0",)
        for fmt in ("markdown", "csv", "latex"):
            assert "ridge_alpha=1.0" in render_report(table, fmt=fmt)

    def test_csv_round_trip_exact(self):
        text = render_report(MAX_TABLE, fmt="csv")
        parsed = parse_report_csv(text)
        for task in MAX_TABLE.tasks:
            for model in MAX_TABLE.models:
                assert parsed.value(task, model) == MAX_TABLE.value(task, model)
                assert (
                    parsed.cells[(task, model)].spread
                    == MAX_TABLE.cells[(task, model)].spread
                )

    def test_latex_has_marks(self):
        text = render_report(MAX_TABLE, fmt="latex")
        assert "\\textbf{10.7}" in text
        assert "\\underline{9.6}" in text

    def test_unknown_format(self):
        with pytest.raises(ConfigurationError, match="format"):
            render_report(MAX_TABLE, fmt="html")


class TestScatterCsv:
    def test_reference_rows(self):
        cards = load_model_cards(FIXTURES_DIR / "model_cards.json")
        overall = group_and_overall_averages(MAX_TABLE)["overall"]
        text = figure_scatter_csv(cards, overall)
        lines = text.strip().splitlines()
        assert lines[0] == "model_id,parameter_count,training_slides,overall_average"
        assert len(lines) == 8
        virchow = [ln for ln in lines if ln.startswith("virchow2,")][0]
        assert virchow == "virchow2,632000000,3100000,60.8"
        atlas = [ln for ln in lines if ln.startswith("atlas,")][0]
        assert atlas.endswith(",61.9")

    def test_missing_card(self):
        with pytest.raises(ConfigurationError, match="model card"):
            figure_scatter_csv({}, {"mystery": 1.0})


class TestAverageInvariant:
    @given(
        st.lists(
            st.tuples(st.floats(0, 100), st.floats(0, 100)),
            min_size=1, max_size=8,
        )
    )
    def test_overall_is_weighted_group_mean(self, pairs):
        # one molecular and one morphology task per pair, two models
        tasks, groups, cells = [], {}, {}
        for i, (a, b) in enumerate(pairs):
            for suffix, group, value in [("mol", "molecular", a), ("mor", "morphology", b)]:
                task = f"t{i}-{suffix}"
                tasks.append(task)
                groups[task] = group
                cells[(task, "m1")] = Cell(value, 0.0)
                cells[(task, "m2")] = Cell(100.0 - value, 0.0)
        table = ReportTable(
            models=("m1", "m2"), tasks=tuple(tasks), groups=groups, cells=cells
        )
        averages = group_and_overall_averages(table)
        n = len(pairs)
        for model in ("m1", "m2"):
            combined = (
                n * averages["molecular"][model] + n * averages["morphology"][model]
            ) / (2 * n)
            assert averages["overall"][model] == pytest.approx(combined, abs=1e-9)
