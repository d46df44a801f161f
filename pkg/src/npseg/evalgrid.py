"""Grid search over (C, N), pattern selection, and agreement metrics."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from math import comb
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cluster import DpConfig, InfeasibleConfig, Pattern, iterate


def ari(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Adjusted Rand index from the contingency table.

    When both partitions are trivial in the same way (one cluster, or all
    singletons) the index is undefined; 1.0 is returned then.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 labels")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_cells = sum(comb(int(v), 2) for v in table.ravel() if v > 1)
    sum_a = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_b = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(a.size, 2)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def canonical(labels: Sequence[int]) -> tuple:
    """Relabel by order of first appearance; equal canonical forms iff ARI == 1."""
    mapping = {}
    return tuple(mapping.setdefault(int(k), len(mapping)) for k in labels)


@dataclass
class Confusion:
    counts: np.ndarray  # truth rows x prediction columns
    truth_labels: list
    pred_labels: list

    def aligned(self) -> "Confusion":
        """Columns reordered greedily so large counts sit on the diagonal."""
        counts = self.counts
        rows, cols = counts.shape
        order, free = [], list(range(cols))
        for r in np.argsort(-counts.max(axis=1), kind="stable"):
            if not free:
                break
            best = max(free, key=lambda c: (counts[r, c], -c))
            order.append((r, best))
            free.remove(best)
        col_for_row = dict(order)
        placed = [col_for_row[r] for r in range(rows) if r in col_for_row]
        perm = placed + free
        return Confusion(counts[:, perm], list(self.truth_labels), [self.pred_labels[c] for c in perm])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["truth\\pred"] + [str(p) for p in self.pred_labels])
            for t, row in zip(self.truth_labels, self.counts):
                w.writerow([str(t)] + [int(v) for v in row])


def confusion(pred: Sequence[int], truth: Sequence[int], align: bool = False) -> Confusion:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label lengths differ: {pred.size} vs {truth.size}")
    tl, ti = np.unique(truth, return_inverse=True)
    pl, pi = np.unique(pred, return_inverse=True)
    counts = np.zeros((tl.size, pl.size), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    out = Confusion(counts, [int(v) for v in tl], [int(v) for v in pl])
    return out.aligned() if align else out


# ---------------------------------------------------------------- grid


@dataclass
class GridCell:
    c: int
    n: int
    cost_per_point: float
    pattern: Pattern
    seed: int
    runtime_s: float = 0.0
    iterations: int = 0

    def to_record(self) -> dict:
        return {
            "c": self.c,
            "n": self.n,
            "cost_per_point": self.cost_per_point,
            "seed": self.seed,
            "labels": self.pattern.labels.tolist(),
            "iterations": self.iterations,
        }


@dataclass
class GridResult:
    cells: list
    skipped: list = field(default_factory=list)  # (c, n, reason)


def cell_seed(master_seed: int, c: int, n: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), 0x67726964, c, n]).generate_state(1, dtype=np.uint32)[0])


def _run_cell(args):
    x, y, provider, config = args
    res = iterate(x, y, provider, config)
    return GridCell(config.c, config.n, res.cost_per_point, res.pattern, config.seed, res.runtime_s, res.iterations)


def grid_search(
    x: np.ndarray,
    y: np.ndarray,
    provider,
    c_range: Sequence[int],
    n_range: Sequence[int],
    dp_config: DpConfig,
    parallelism: int = 1,
) -> GridResult:
    """Run :func:`iterate` for every feasible (c, n); infeasible cells are skipped with a note.

    Each cell's seed is derived from ``dp_config.seed`` and (c, n), so the
    result does not depend on ``parallelism``.
    """
    c_range, n_range = list(c_range), list(n_range)
    if not c_range or not n_range:
        raise ValueError("empty c or n range")
    L = len(y)
    jobs, skipped = [], []
    for c in sorted(c_range):
        for n in sorted(n_range):
            cfg = replace(dp_config, c=c, n=n, seed=cell_seed(dp_config.seed, c, n))
            try:
                cfg.check(L)
            except InfeasibleConfig as exc:
                skipped.append((c, n, str(exc)))
                continue
            jobs.append((x, y, provider, cfg))
    if not jobs:
        raise InfeasibleConfig("every (c, n) cell is infeasible: " + "; ".join(s[2] for s in skipped))
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    cells.sort(key=lambda cell: (cell.c, cell.n))
    return GridResult(cells, skipped)


@dataclass
class Selection:
    selected: list
    most_common: GridCell
    lowest_cost: GridCell
    class_size: int = 1


def select_combos(cells: Sequence[GridCell], eps_rel: float = 0.02,
                  explicit: Optional[Sequence[tuple]] = None) -> Selection:
    """Pick cells near each C's best cost, then the modal pattern among them.

    ``explicit`` is a list of (c, n) pairs overriding the rule.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("no cells to select from")
    lowest = min(cells, key=lambda cell: (cell.cost_per_point, cell.c, cell.n))
    if explicit is not None:
        wanted = {(int(c), int(n)) for c, n in explicit}
        selected = [cell for cell in cells if (cell.c, cell.n) in wanted]
        if not selected:
            raise ValueError(f"none of the requested cells {sorted(wanted)} exist in the grid")
    else:
        selected = []
        for c in sorted({cell.c for cell in cells}):
            group = [cell for cell in cells if cell.c == c]
            best = min(cell.cost_per_point for cell in group)
            selected += [cell for cell in group if cell.cost_per_point <= best + eps_rel * abs(best)]
    classes = {}
    for cell in selected:
        classes.setdefault(canonical(cell.pattern.labels), []).append(cell)
    ranked = sorted(
        classes.values(),
        key=lambda members: (-len(members), min(m.cost_per_point for m in members)),
    )
    top = ranked[0]
    most_common = min(top, key=lambda cell: (cell.cost_per_point, cell.c, cell.n))
    return Selection(selected, most_common, lowest, len(top))


def write_cells_csv(cells: Sequence[GridCell], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["c", "n", "cost_per_point", "seed"])
        for cell in cells:
            w.writerow([cell.c, cell.n, repr(float(cell.cost_per_point)), cell.seed])
    return path


def read_cells_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            {"c": int(r["c"]), "n": int(r["n"]), "cost_per_point": float(r["cost_per_point"]), "seed": int(r["seed"])}
            for r in csv.DictReader(fh)
        ]


def emit_scatter(cells: Sequence[GridCell], path, selection: Optional[Selection] = None) -> tuple:
    """Write ``<path>.csv`` and an SVG scatter of cost against N, one series per C."""
    from .report import plot_grid_scatter

    if not cells:
        raise ValueError("no cells to plot")
    base = Path(path)
    csv_path = write_cells_csv(cells, base.with_name(base.name + ".csv"))
    svg_path = base.with_name(base.name + ".svg")
    plot_grid_scatter(cells, svg_path, selection)
    return csv_path, svg_path
