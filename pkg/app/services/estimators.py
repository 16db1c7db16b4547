"""Transition-matrix power estimation from walk forests, with dense oracles and audits.

T̂^k[u, v] is the number of depth-k walkers of the tree seeded at u that sit
on v, divided by ∏F. The dense oracles here are the trusted base for every
statistical audit and refuse graphs above ``settings.oracle_max_nodes``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import Field
from scipy import stats

from app.config import settings
from app.errors import ContractViolation, OracleGuardError
from app.graph.compact_adj import CompactAdj
from app.reports import Report
from app.services.traversal import RngStream, WalkForest, traverse

logger = logging.getLogger(__name__)

# Forest nodes materialized per Monte-Carlo group.
_MC_GROUP_NODES = 2_000_000


# ── Oracles ──────────────────────────────────────────────────────────


def _guard(n: int) -> None:
    if n > settings.oracle_max_nodes:
        raise OracleGuardError(
            f"dense oracle refused: n={n} exceeds guard {settings.oracle_max_nodes}"
        )


def dense_transition(adj: CompactAdj) -> np.ndarray:
    """T = D⁻¹A as a dense row-stochastic matrix."""
    _guard(adj.n)
    return adj.to_dense() / adj.degrees[:, None]


def exact_tk(dense: np.ndarray, k: int) -> np.ndarray:
    """Exact k-th power of a dense transition matrix."""
    dense = np.asarray(dense, dtype=np.float64)
    _guard(dense.shape[0])
    if k < 0:
        raise ContractViolation("k must be non-negative")
    return np.linalg.matrix_power(dense, k)


def exact_estimator_variance(dense: np.ndarray, fanouts: Sequence[int]) -> np.ndarray:
    """Exact Var(T̂^k[u, v]) for every (u, v), siblings' shared prefixes included.

    Descendant counts satisfy E[S] = f·T·E[S'] and
    E[S²] = f·T·E[S'²] + f(f-1)·(T·E[S'])², from the root level down.
    """
    dense = np.asarray(dense, dtype=np.float64)
    _guard(dense.shape[0])
    first = np.eye(dense.shape[0])
    second = np.eye(dense.shape[0])
    for f in reversed(list(fanouts)):
        child_mean = dense @ first
        child_second = dense @ second
        first = f * child_mean
        second = f * child_second + f * (f - 1) * child_mean**2
    total = float(np.prod(fanouts)) if len(fanouts) else 1.0
    return second / total**2 - (first / total) ** 2


# ── Estimate ─────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class TransitionEstimate:
    """Sparse T̂^k; row i belongs to ``batch[i]``."""

    batch: np.ndarray
    k: int
    fanouts: tuple[int, ...]
    entries: sp.csr_matrix

    def row(self, i: int) -> np.ndarray:
        return self.entries.getrow(i).toarray().ravel()

    def to_dense(self) -> np.ndarray:
        return self.entries.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def write(self, path: Path | str) -> Path:
        """``seed<TAB>v<TAB>value`` lines, non-zero entries only, batch order."""
        path = Path(path)
        coo = self.entries.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("seed\tv\tvalue\n")
            for i in order.tolist():
                handle.write(f"{self.batch[coo.row[i]]}\t{coo.col[i]}\t{coo.data[i]:.17g}\n")
        return path


def estimate_from_forest(forest: WalkForest, k: int, n: int) -> TransitionEstimate:
    """Depth-k counts of each tree divided by ∏F[:k]."""
    if k > len(forest.fanouts):
        raise ContractViolation(f"k={k} exceeds the forest depth {len(forest.fanouts)}")
    scale = float(np.prod(forest.fanouts[:k])) if k else 1.0
    entries = forest.depth_counts(k, n) / scale
    return TransitionEstimate(
        batch=forest.batch, k=k, fanouts=forest.fanouts, entries=sp.csr_matrix(entries)
    )


def estimate_tk(
    adj: CompactAdj,
    batch: Sequence[int] | np.ndarray,
    k: int,
    f: int,
    rng: RngStream | int | None = None,
    *,
    fanouts: Sequence[int] | None = None,
    workers: int = 1,
    dump: Path | str | None = None,
) -> TransitionEstimate:
    """One-run unbiased estimate of T^k rows for ``batch`` (uniform bias, raw graph).

    ``dump`` writes the walk forest behind the estimate as text.
    """
    if k < 1 or f < 1:
        raise ContractViolation("estimate_tk needs k >= 1 and f >= 1")
    fanouts = tuple(fanouts) if fanouts is not None else (f,) * k
    if len(fanouts) != k:
        raise ContractViolation(f"{len(fanouts)} fanouts given for k={k}")
    forest = traverse(adj, batch, fanouts, rng=rng, workers=workers)
    if dump is not None:
        forest.dump(dump)
        logger.info("Walk forest (%d nodes) written to %s", forest.node.shape[0], dump)
    return estimate_from_forest(forest, k, adj.n)


# ── Monte-Carlo moments ──────────────────────────────────────────────


@dataclass
class _Moments:
    runs: int
    raw: list[np.ndarray]  # Σ_r x^p for p = 1..len(raw), shape (b, n)

    def mean(self) -> np.ndarray:
        return self.raw[0] / self.runs

    def variance(self) -> np.ndarray:
        """Unbiased sample variance per entry."""
        mu = self.mean()
        centered = self.raw[1] / self.runs - mu**2
        return np.maximum(centered, 0.0) * self.runs / max(self.runs - 1, 1)

    def variance_se(self) -> np.ndarray:
        """Standard error of the sample variance (fourth central moment form)."""
        r = self.runs
        mu = self.mean()
        e2, e3, e4 = (m / r for m in self.raw[1:4])
        m2 = np.maximum(e2 - mu**2, 0.0)
        m4 = np.maximum(e4 - 4 * mu * e3 + 6 * mu**2 * e2 - 3 * mu**4, 0.0)
        return np.sqrt(np.maximum(m4 - m2**2 * (r - 3) / max(r - 1, 1), 0.0) / r)


def monte_carlo_moments(
    adj: CompactAdj,
    batch: np.ndarray,
    fanouts: tuple[int, ...],
    runs: int,
    rng: RngStream,
    *,
    order: int = 2,
    workers: int = 1,
) -> _Moments:
    """Raw moments of T̂^k over ``runs`` independent forests (k = len(fanouts))."""
    b, n, k = batch.shape[0], adj.n, len(fanouts)
    scale = float(np.prod(fanouts))
    per_run = b * int(sum(np.cumprod((1,) + tuple(fanouts))))
    group = max(1, _MC_GROUP_NODES // per_run)
    raw = [np.zeros((b, n)) for _ in range(order)]

    for g, lo in enumerate(range(0, runs, group)):
        reps = min(group, runs - lo)
        forest = traverse(adj, np.tile(batch, reps), fanouts, rng=rng.substream(g), workers=workers)
        coo = forest.depth_counts(k, n).tocoo()
        rows = coo.row % b
        values = coo.data / scale
        for p in range(order):
            np.add.at(raw[p], (rows, coo.col), values ** (p + 1))

    logger.debug("Monte-Carlo: %d runs over %d seed(s), k=%d", runs, b, k)
    return _Moments(runs=runs, raw=raw)


# ── Audits ───────────────────────────────────────────────────────────


class UnbiasednessReport(Report):
    k: int
    fanouts: list[int]
    runs: int
    sigma: float
    tolerance: float
    max_abs_error: float
    mean_abs_error: float
    max_standard_error: float
    phantom_entries: int
    entries: list[tuple[int, int, float, float, float]] = Field(default_factory=list, exclude=True)


class VarianceReport(Report):
    k: int
    fanouts: list[int]
    runs: int
    bound: float
    slack: float
    max_empirical_variance: float
    max_exact_variance: float
    bound_holds: bool
    bound_violations: int
    exact_matches: bool
    max_exact_deviation_se: float
    independence_matches: bool
    strict_bound: bool
    entries: list[tuple[int, int, float, float, float, float]] = Field(default_factory=list, exclude=True)


class FanoutOneReport(Report):
    seed_node: int
    k: int
    runs: int
    chi_square: float
    p_value: float
    outside_support: int


def _prepare(adj: CompactAdj, batch, k: int, f: int) -> tuple[np.ndarray, tuple[int, ...], np.ndarray]:
    _guard(adj.n)
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if k < 1 or f < 1:
        raise ContractViolation("audits need k >= 1 and f >= 1")
    fanouts = (f,) * k
    exact = exact_tk(dense_transition(adj), k)[batch]
    return batch, fanouts, exact


def audit_unbiasedness(
    adj: CompactAdj,
    batch: Sequence[int] | np.ndarray,
    k: int,
    f: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    sigma: float | None = None,
    workers: int = 1,
) -> UnbiasednessReport:
    """Mean of T̂^k over ``runs`` forests against the dense power, per entry.

    Tolerance is sigma·sqrt(1/(4f^k)/runs): the variance bound plugged into
    the standard error of a mean.
    """
    sigma = settings.audit_sigma if sigma is None else sigma
    rng = rng if isinstance(rng, RngStream) else RngStream(settings.seed if rng is None else rng)
    batch, fanouts, exact = _prepare(adj, batch, k, f)
    moments = monte_carlo_moments(adj, batch, fanouts, runs, rng, order=2, workers=workers)
    mean = moments.mean()
    error = np.abs(mean - exact)
    se = np.sqrt(moments.variance() / runs)
    tolerance = sigma * math.sqrt(1.0 / (4.0 * f**k) / runs)
    phantom = int(np.count_nonzero((mean > 0) & (exact == 0)))

    rows = [
        (int(batch[i]), int(v), float(exact[i, v]), float(mean[i, v]), float(se[i, v]))
        for i, v in zip(*np.nonzero((exact > 0) | (mean > 0)))
    ]
    report = UnbiasednessReport(
        name="unbiasedness",
        passed=bool(error.max() <= tolerance and phantom == 0),
        k=k,
        fanouts=list(fanouts),
        runs=runs,
        sigma=sigma,
        tolerance=tolerance,
        max_abs_error=float(error.max()),
        mean_abs_error=float(error.mean()),
        max_standard_error=float(se.max()),
        phantom_entries=phantom,
        entries=rows,
    )
    logger.info(
        "Unbiasedness k=%d f=%d runs=%d: max error %.3g (tolerance %.3g) -> %s",
        k, f, runs, report.max_abs_error, tolerance, "pass" if report.passed else "FAIL",
    )
    return report


def audit_variance(
    adj: CompactAdj,
    batch: Sequence[int] | np.ndarray,
    k: int,
    f: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    sigma: float | None = None,
    slack: float | None = None,
    strict_bound: bool = False,
    workers: int = 1,
) -> VarianceReport:
    """Empirical Var(T̂^k) against the exact tree-correlated variance and the 1/(4f^k) bound.

    Sibling walkers share their prefix, so the exact variance can exceed
    the bound; ``passed`` requires agreement with the exact variance, and
    additionally the bound when ``strict_bound`` is set.
    """
    sigma = settings.audit_sigma if sigma is None else sigma
    slack = settings.variance_slack if slack is None else slack
    rng = rng if isinstance(rng, RngStream) else RngStream(settings.seed if rng is None else rng)
    batch, fanouts, exact = _prepare(adj, batch, k, f)
    exact_var = exact_estimator_variance(dense_transition(adj), fanouts)[batch]
    independent_var = exact * (1.0 - exact) / f**k

    moments = monte_carlo_moments(adj, batch, fanouts, runs, rng, order=4, workers=workers)
    empirical = moments.variance()
    se = moments.variance_se()
    bound = 1.0 / (4.0 * f**k)

    over_bound = empirical > bound * (1.0 + slack)
    deviation = np.abs(empirical - exact_var)
    scaled = np.where(se > 0, deviation / np.where(se > 0, se, 1.0), np.where(deviation > 1e-12, np.inf, 0.0))
    exact_ok = bool(scaled.max() <= sigma)
    indep_dev = np.abs(empirical - independent_var)
    independence_ok = bool(np.all((indep_dev <= sigma * se) | (indep_dev <= 1e-12)))
    bound_ok = not bool(over_bound.any())

    rows = [
        (int(batch[i]), int(v), float(empirical[i, v]), float(exact_var[i, v]),
         float(independent_var[i, v]), float(se[i, v]))
        for i, v in zip(*np.nonzero((exact > 0) | (empirical > 0)))
    ]
    if not bound_ok:
        logger.warning(
            "Variance bound %.4g exceeded on %d entr(y/ies); exact variance max %.4g",
            bound, int(over_bound.sum()), float(exact_var.max()),
        )
    report = VarianceReport(
        name="variance",
        passed=exact_ok and (bound_ok or not strict_bound),
        k=k,
        fanouts=list(fanouts),
        runs=runs,
        bound=bound,
        slack=slack,
        max_empirical_variance=float(empirical.max()),
        max_exact_variance=float(exact_var.max()),
        bound_holds=bound_ok,
        bound_violations=int(over_bound.sum()),
        exact_matches=exact_ok,
        max_exact_deviation_se=float(scaled.max()),
        independence_matches=independence_ok,
        strict_bound=strict_bound,
        entries=rows,
    )
    logger.info(
        "Variance k=%d f=%d runs=%d: max %.4g (bound %.4g) -> %s",
        k, f, runs, report.max_empirical_variance, bound, "pass" if report.passed else "FAIL",
    )
    return report


def audit_fanout_one(
    adj: CompactAdj,
    seed_node: int,
    k: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    alpha: float = 1e-3,
    workers: int = 1,
) -> FanoutOneReport:
    """Fanout 1 is a simple random walk: endpoint histogram vs the exact T^k row."""
    rng = rng if isinstance(rng, RngStream) else RngStream(settings.seed if rng is None else rng)
    _guard(adj.n)
    expected_row = exact_tk(dense_transition(adj), k)[seed_node]
    forest = traverse(adj, np.full(runs, seed_node), (1,) * k, rng=rng, workers=workers)
    ends = forest.node[forest.depth == k]
    observed = np.bincount(ends, minlength=adj.n).astype(np.float64)

    support = expected_row > 0
    outside = int(observed[~support].sum())
    expected = expected_row[support] * runs
    if support.sum() > 1:
        result = stats.chisquare(observed[support], expected * observed[support].sum() / expected.sum())
        chi2, p_value = float(result.statistic), float(result.pvalue)
    else:
        chi2, p_value = 0.0, 1.0

    report = FanoutOneReport(
        name="fanout_one",
        passed=bool(p_value > alpha and outside == 0),
        seed_node=int(seed_node),
        k=k,
        runs=runs,
        chi_square=chi2,
        p_value=p_value,
        outside_support=outside,
    )
    logger.info("Fanout-1 walk from %d, k=%d: p=%.4g -> %s", seed_node, k, p_value,
                "pass" if report.passed else "FAIL")
    return report
