"""Traversal timing across graph sizes and CompactAdj storage scaling."""

from __future__ import annotations

import logging
import time
from typing import Sequence

import numpy as np
from pydantic import Field

from app.graph.compact_adj import build_compact_adj
from app.graph.generators import generate_graph
from app.reports import Report
from app.services.traversal import RngStream, traverse

logger = logging.getLogger(__name__)


class BenchReport(Report):
    batch_size: int
    fanouts: list[int]
    repeats: int
    ratio: float | None = None
    rows: list[tuple[int, int, float, float]] = Field(default_factory=list, exclude=True)


class StorageReport(Report):
    c_nodes: float
    c_edges: float
    c_const: float
    r_squared: float
    threshold: float
    rows: list[tuple[int, int, int]] = Field(default_factory=list, exclude=True)


def _er_adjacency(n: int, avg_degree: float, seed: int):
    p = min(1.0, avg_degree / max(n - 1, 1))
    return build_compact_adj(generate_graph("erdos_renyi", n, p, seed))


def bench_traverse(
    sizes: Sequence[int],
    batch_size: int = 64,
    fanouts: Sequence[int] = (3, 3),
    repeats: int = 20,
    seed: int = 1,
    *,
    avg_degree: float = 10.0,
    max_ratio: float = 2.0,
) -> BenchReport:
    """Mean / stddev wall time of one traversal per graph size (identical b and F).

    The verdict needs at least two sizes spanning 100x in n.
    """
    rng = RngStream(seed)
    fanouts = list(fanouts)
    rows = []
    for i, n in enumerate(sizes):
        adj = _er_adjacency(n, avg_degree, seed + i)
        gen = rng.generator(9, i)
        traverse(adj, gen.integers(0, n, size=batch_size), fanouts, rng=rng.substream(10, i))
        timings = []
        for r in range(repeats):
            batch = gen.integers(0, n, size=batch_size)
            start = time.perf_counter()
            traverse(adj, batch, fanouts, rng=rng.substream(10, i, r))
            timings.append(time.perf_counter() - start)
        rows.append((int(n), adj.m, float(np.mean(timings)), float(np.std(timings))))
        logger.info("bench n=%d m=%d: %.3g s ± %.2g", n, adj.m, rows[-1][2], rows[-1][3])

    ratio = None
    passed = None
    if len(rows) >= 2:
        means = [row[2] for row in rows]
        ratio = max(means) / min(means)
        if max(sizes) >= 100 * min(sizes):
            passed = ratio <= max_ratio
    return BenchReport(
        name="bench_traverse",
        passed=passed,
        batch_size=batch_size,
        fanouts=fanouts,
        repeats=repeats,
        ratio=ratio,
        rows=rows,
    )


def storage_audit(
    sizes: Sequence[int] = (100, 300, 1000, 3000),
    degrees: Sequence[float] = (2.0, 5.0, 10.0),
    seed: int = 1,
    *,
    threshold: float = 0.999,
) -> StorageReport:
    """Least-squares fit of CompactAdj bytes against c₁n + c₂m + c₀ over a (n, m) grid."""
    rows = []
    for i, n in enumerate(sizes):
        for j, degree in enumerate(degrees):
            adj = _er_adjacency(n, degree, seed + 100 * i + j)
            rows.append((int(n), adj.m, adj.nbytes))
    data = np.array(rows, dtype=np.float64)
    design = np.column_stack([data[:, 0], data[:, 1], np.ones(data.shape[0])])
    coef, *_ = np.linalg.lstsq(design, data[:, 2], rcond=None)
    fitted = design @ coef
    total = np.sum((data[:, 2] - data[:, 2].mean()) ** 2)
    r_squared = 1.0 - float(np.sum((data[:, 2] - fitted) ** 2) / total) if total > 0 else 1.0
    logger.info("Storage fit: bytes = %.3g n + %.3g m + %.3g (R²=%.6f)", *coef, r_squared)
    return StorageReport(
        name="storage",
        passed=r_squared >= threshold,
        c_nodes=float(coef[0]),
        c_edges=float(coef[1]),
        c_const=float(coef[2]),
        r_squared=r_squared,
        threshold=threshold,
        rows=rows,
    )
