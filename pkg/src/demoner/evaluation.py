"""Aggregation of run rows into mean ± std cells and plain-text comparison tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .training import RunResult


@dataclass(frozen=True, order=True)
class CellKey:
    dataset: str
    strategy: str
    template: str
    n_train: int

    @property
    def row(self) -> tuple[str, str]:
        return self.strategy, self.template

    @property
    def column(self) -> tuple[str, int]:
        return self.dataset, self.n_train


@dataclass(frozen=True)
class CellStats:
    mean: float
    std: float  # population
    count: int
    complete: bool = True
    min: float = 0.0
    max: float = 0.0


def cell_key(r: RunResult) -> CellKey:
    return CellKey(r.dataset, r.strategy, r.template, int(r.n_train))


def read_results(path) -> list[RunResult]:
    rows = []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(RunResult.from_dict(json.loads(line)))
    return rows


def aggregate(results: Iterable[RunResult], expected: int | None = None) -> dict[CellKey, CellStats]:
    """Group successful runs by cell; mean and population std of F1.

    A cell is complete when it holds ``expected`` runs; by default that is
    the number of distinct (subsample, seed) pairs seen in the input.
    Cells keep the order in which they first appear.
    """
    ok = [r for r in results if r.error is None]
    if expected is None:
        expected = len({(r.subsample, r.seed) for r in ok})
    groups: dict[CellKey, list[float]] = {}
    for r in ok:
        groups.setdefault(cell_key(r), []).append(float(r.f1))
    out = {}
    for key in groups:  # first-appearance order, so rows follow the run's variant order
        vals = np.sort(np.asarray(groups[key]))  # order-independent summation
        out[key] = CellStats(
            float(vals.mean()), float(vals.std()), len(vals), len(vals) == expected, float(vals[0]), float(vals[-1])
        )
    return out


def summary_json(table: dict[CellKey, CellStats]) -> str:
    return json.dumps([{**asdict(k), **asdict(v)} for k, v in table.items()], indent=2, sort_keys=True)


@dataclass
class Report:
    text: str
    best: dict[tuple[str, int], tuple[str, str]]
    second: dict[tuple[str, int], tuple[str, str]]
    deltas: dict[CellKey, float]


def _rank(rows, column, table, exclude):
    scored = [(table[CellKey(column[0], r[0], r[1], column[1])].mean, i, r) for i, r in enumerate(rows)
              if r != exclude and CellKey(column[0], r[0], r[1], column[1]) in table]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [r for _, _, r in scored]


def report(table: dict[CellKey, CellStats], baseline: tuple[str, str] = ("none", "none"), scale: float = 100.0) -> Report:
    """Render a strategy × template by dataset × n_train grid.

    Cells show ``mean ±std`` (scaled by ``scale``) and the difference from the
    baseline row in the same column. Per column the best non-baseline row is
    wrapped in ``**`` and the runner-up in ``__``.
    """
    rows = list(dict.fromkeys(k.row for k in table))
    columns = sorted(dict.fromkeys(k.column for k in table))
    if baseline not in rows:
        raise KeyError(f"baseline row {baseline} not in table")
    rows.remove(baseline)
    rows.insert(0, baseline)

    best, second, deltas = {}, {}, {}
    for col in columns:
        ranked = _rank(rows, col, table, baseline)
        if ranked:
            best[col] = ranked[0]
        if len(ranked) > 1:
            second[col] = ranked[1]

    header = ["strategy", "template"] + [f"{d}/{n}" for d, n in columns]
    lines = [header]
    for row in rows:
        cells = [row[0], row[1]]
        for col in columns:
            key = CellKey(col[0], row[0], row[1], col[1])
            stats = table.get(key)
            if stats is None:
                cells.append("-")
                continue
            text = f"{stats.mean * scale:.2f} ±{stats.std * scale:.2f}"
            if not stats.complete:
                text += "?"
            base = table.get(CellKey(col[0], baseline[0], baseline[1], col[1]))
            if base is not None and row != baseline:
                deltas[key] = stats.mean - base.mean
                text += f" ({round((stats.mean - base.mean) * scale, 2) + 0.0:+.2f})"  # no "-0.00"
            if best.get(col) == row:
                text = f"**{text}**"
            elif second.get(col) == row:
                text = f"__{text}__"
            cells.append(text)
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    rendered = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
    rendered.insert(1, "  ".join("-" * w for w in widths))
    return Report("\n".join(rendered) + "\n", best, second, deltas)


def perturbation_report(
    original: dict[CellKey, CellStats], perturbed: dict[CellKey, CellStats]
) -> dict[CellKey, float]:
    """Per-cell ``original - perturbed`` mean F1."""
    if set(original) != set(perturbed):
        missing = sorted(set(original) ^ set(perturbed))
        raise KeyError(f"cell keys differ between original and perturbed: {missing}")
    return {k: original[k].mean - perturbed[k].mean for k in original}


def format_deltas(deltas: dict[CellKey, float], scale: float = 100.0) -> str:
    lines = [f"{k.dataset}\t{k.strategy}\t{k.template}\t{k.n_train}\t{v * scale:+.2f}" for k, v in sorted(deltas.items())]
    return "\n".join(["dataset\tstrategy\ttemplate\tn_train\tdelta"] + lines) + "\n"


def gap(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Mean difference ``a - b`` and the population std of paired differences."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(d.mean()), float(d.std())
