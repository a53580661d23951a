from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from demoner.evaluation import (
    CellKey,
    CellStats,
    aggregate,
    gap,
    perturbation_report,
    read_results,
    report,
)
from demoner.training import RunResult

FIXTURES = Path(__file__).parent / "fixtures"


def row(f1, strategy="none", template="none", n=25, sub=0, seed=0, error=None):
    return RunResult(f1=f1, dataset="d", strategy=strategy, template=template, n_train=n, subsample=sub, seed=seed, error=error)


def test_single_run_cell():
    stats = aggregate([row(0.4)])[CellKey("d", "none", "none", 25)]
    assert (stats.mean, stats.std, stats.count, stats.complete) == (0.4, 0.0, 1, True)


def test_two_runs_population_std():
    stats = aggregate([row(0.5, seed=0), row(0.7, seed=1)])[CellKey("d", "none", "none", 25)]
    assert stats.mean == pytest.approx(0.6) and stats.std == pytest.approx(0.1)


def test_incomplete_and_failed_rows():
    rows = [row(0.5, seed=0), row(0.7, seed=1), row(0.6, "popular", "context", seed=0), row(0.0, "popular", "context", seed=1, error="boom")]
    table = aggregate(rows)
    assert table[CellKey("d", "popular", "context", 25)].complete is False
    assert table[CellKey("d", "popular", "context", 25)].count == 1


def test_fixture_matches_recount():
    rows = read_results(FIXTURES / "table_results.jsonl")
    table = aggregate(rows)
    for key, stats in table.items():
        vals = [r.f1 for r in rows if (r.dataset, r.strategy, r.template, r.n_train) == (key.dataset, key.strategy, key.template, key.n_train)]
        assert stats.count == len(vals) == 15
        assert stats.mean == pytest.approx(sum(vals) / len(vals), abs=1e-15)
        assert stats.std == pytest.approx(np.sqrt(np.mean((np.array(vals) - np.mean(vals)) ** 2)), abs=1e-12)


def test_report_deltas_and_marking():
    table = {
        CellKey("d", "none", "none", 25): CellStats(0.50, 0.01, 1),
        CellKey("d", "popular", "context", 25): CellStats(0.57, 0.02, 1),
        CellKey("d", "random", "context", 25): CellStats(0.52, 0.02, 1),
    }
    rep = report(table)
    assert rep.deltas[CellKey("d", "popular", "context", 25)] == pytest.approx(0.07)
    assert rep.best[("d", 25)] == ("popular", "context")
    assert rep.second[("d", 25)] == ("random", "context")
    assert "**57.00 ±2.00 (+7.00)**" in rep.text
    assert "__52.00 ±2.00 (+2.00)__" in rep.text


def test_report_needs_baseline():
    with pytest.raises(KeyError):
        report({CellKey("d", "popular", "context", 25): CellStats(0.5, 0.0, 1)})


def test_report_flags_incomplete_cells():
    table = {
        CellKey("d", "none", "none", 25): CellStats(0.5, 0.0, 1),
        CellKey("d", "popular", "context", 25): CellStats(0.6, 0.0, 1, complete=False),
    }
    assert "60.00 ±0.00? (+10.00)" in report(table).text


def test_golden_report():
    table = aggregate(read_results(FIXTURES / "table_results.jsonl"))
    assert report(table).text == (FIXTURES / "table_report.txt").read_text()


def test_golden_summary():
    from demoner.evaluation import summary_json

    table = aggregate(read_results(FIXTURES / "table_results.jsonl"))
    assert json.loads(summary_json(table)) == json.loads((FIXTURES / "table_summary.json").read_text())


def test_perturbation_report():
    k = CellKey("d", "popular", "context", 25)
    same = {k: CellStats(0.5, 0.0, 1)}
    assert perturbation_report(same, same) == {k: 0.0}
    assert perturbation_report({k: CellStats(0.57, 0, 1)}, {k: CellStats(0.52, 0, 1)})[k] == pytest.approx(0.05)
    with pytest.raises(KeyError):
        perturbation_report(same, {})


def test_gap():
    assert gap([0.6, 0.8], [0.5, 0.5]) == pytest.approx((0.2, 0.1))
