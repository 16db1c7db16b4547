"""Monte-Carlo audits of gradients and sampled message passing, and the consolidated check."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Sequence

import numpy as np
from pydantic import Field

from app.config import settings
from app.errors import ContractViolation
from app.graph.compact_adj import CompactAdj, with_self_loops
from app.reports import Report
from app.services.ensemble import ensemble_equivalence_check
from app.services.estimators import (
    audit_fanout_one,
    audit_unbiasedness,
    audit_variance,
    dense_transition,
    exact_tk,
    monte_carlo_moments,
)
from app.services.learning import factorization_gradient
from app.services.specializations import DeepWalkAccumulator, renormalize, sample_rooted_adjacency
from app.services.traversal import RngStream, traverse

logger = logging.getLogger(__name__)

CHECKS: tuple[str, ...] = ("1", "2", "3", "4", "5", "8", "walk")
MESSAGE_PASSING_MAX_NODES = 100


def _stream(rng: RngStream | int | None) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(settings.seed if rng is None else rng)


def _z_scores(mean: np.ndarray, target: np.ndarray, se: np.ndarray) -> np.ndarray:
    deviation = np.abs(mean - target)
    safe = np.where(se > 0, se, 1.0)
    return np.where(se > 0, deviation / safe, np.where(deviation > 1e-12, np.inf, 0.0))


# ── Factorization gradient ───────────────────────────────────────────


class FactorizationReport(Report):
    k: int
    fanout: int
    runs: int
    relative_error_L: float
    relative_error_R: float
    tolerance: float


def audit_factorization_gradient(
    adj: CompactAdj,
    k: int,
    f: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    dim: int = 4,
    coefficient: float = 1.0,
    tolerance: float = 0.02,
    workers: int = 1,
) -> FactorizationReport:
    """Mean gradient over sampled T̂^k against the gradient at the exact T^k.

    The gradient is affine in T̂, so its mean over runs is the gradient at
    the mean estimate.
    """
    rng = _stream(rng)
    gen = rng.generator(4, k, f)
    batch = np.arange(adj.n, dtype=np.int64)
    L = gen.standard_normal((adj.n, dim)) / math.sqrt(dim)
    R = gen.standard_normal((dim, adj.n)) / math.sqrt(dim)
    exact = exact_tk(dense_transition(adj), k)
    moments = monte_carlo_moments(adj, batch, (f,) * k, runs, rng, order=1, workers=workers)

    gL_mc, gR_mc = factorization_gradient(L, R, [coefficient], [moments.mean()])
    gL, gR = factorization_gradient(L, R, [coefficient], [exact])
    err_L = float(np.linalg.norm(gL_mc - gL) / max(np.linalg.norm(gL), 1e-300))
    err_R = float(np.linalg.norm(gR_mc - gR) / max(np.linalg.norm(gR), 1e-300))
    report = FactorizationReport(
        name="factorization_gradient",
        passed=max(err_L, err_R) <= tolerance,
        k=k,
        fanout=f,
        runs=runs,
        relative_error_L=err_L,
        relative_error_R=err_R,
        tolerance=tolerance,
    )
    logger.info("Factorization gradient: relative errors %.4g / %.4g -> %s",
                err_L, err_R, "pass" if report.passed else "FAIL")
    return report


# ── DeepWalk gradient ────────────────────────────────────────────────


def deepwalk_pair_weights(
    dense: np.ndarray, batch: np.ndarray, fanouts: Sequence[int], window: int
) -> np.ndarray:
    """Expected η-weighted pair coefficients M[w, u] over one traversal of ``batch``.

    A child at depth d paired with its ancestor at depth a = d - k carries
    ∏F[a:d]·(C-k+1)/C in expectation, the ancestor distributed as T^a from
    the seed and the child as T^k from the ancestor.
    """
    n = dense.shape[0]
    seeds = np.zeros(n)
    np.add.at(seeds, batch, 1.0)
    h = len(fanouts)
    powers = [np.eye(n)]
    for _ in range(h):
        powers.append(powers[-1] @ dense)
    reach = [seeds @ powers[a] for a in range(h + 1)]
    M = np.zeros((n, n))
    for d in range(1, h + 1):
        for k in range(1, min(window, d) + 1):
            a = d - k
            weight = float(np.prod(fanouts[a:d])) * (window - k + 1) / window
            M += weight * reach[a][:, None] * powers[k]
    return M


def deepwalk_oracle_gradient(
    Z: np.ndarray,
    dense: np.ndarray,
    batch: np.ndarray,
    fanouts: Sequence[int],
    window: int,
    negatives: np.ndarray,
) -> np.ndarray:
    """Full-graph expected gradient of the DeepWalk accumulated loss."""
    M = deepwalk_pair_weights(dense, batch, fanouts, window)
    grad = -(M + M.T) @ Z
    contrastive = DeepWalkAccumulator(Z, window)
    contrastive.begin(batch, negatives)
    return grad + contrastive.buffer.grad


class DeepWalkGradientReport(Report):
    runs: int
    fanouts: list[int]
    window: int
    max_row_relative_error: float
    max_z_score: float
    sigma: float
    tolerance: float
    touched_rows: int


def audit_deepwalk_gradient(
    adj: CompactAdj,
    fanouts: Sequence[int],
    window: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    dim: int = 4,
    negatives: int = 5,
    tolerance: float = 0.05,
    sigma: float | None = None,
) -> DeepWalkGradientReport:
    """Mean accumulated DeepWalk gradient (fixed Z, fixed negatives) against the oracle."""
    sigma = settings.audit_sigma if sigma is None else sigma
    rng = _stream(rng)
    dense = dense_transition(adj)
    gen = rng.generator(5, window)
    Z = gen.standard_normal((adj.n, dim)) / math.sqrt(dim)
    batch = np.arange(adj.n, dtype=np.int64)
    negs = gen.integers(0, adj.n, size=negatives)
    fanouts = tuple(fanouts)

    total = np.zeros_like(Z)
    total_sq = np.zeros_like(Z)
    touched = np.zeros(adj.n, dtype=bool)
    for r in range(runs):
        acc = DeepWalkAccumulator(Z, window)
        acc.begin(batch, negs)
        traverse(adj, batch, fanouts, accumulate=acc, rng=rng.substream(6, r))
        total += acc.buffer.grad
        total_sq += acc.buffer.grad**2
        touched |= acc.buffer.touched

    mean = total / runs
    se = np.sqrt(np.maximum(total_sq / runs - mean**2, 0.0) * runs / max(runs - 1, 1) / runs)
    oracle = deepwalk_oracle_gradient(Z, dense, batch, fanouts, window, negs)
    rows = np.flatnonzero(touched)
    row_err = np.linalg.norm(mean[rows] - oracle[rows], axis=1) / np.maximum(
        np.linalg.norm(oracle[rows], axis=1), 1e-300
    )
    z = _z_scores(mean, oracle, se)
    report = DeepWalkGradientReport(
        name="deepwalk_gradient",
        passed=bool(row_err.max() <= tolerance),
        runs=runs,
        fanouts=list(fanouts),
        window=window,
        max_row_relative_error=float(row_err.max()),
        max_z_score=float(z.max()),
        sigma=sigma,
        tolerance=tolerance,
        touched_rows=int(rows.size),
    )
    logger.info("DeepWalk gradient: max row error %.4g, max z %.3g -> %s",
                report.max_row_relative_error, report.max_z_score,
                "pass" if report.passed else "FAIL")
    return report


# ── Message passing ──────────────────────────────────────────────────


class MessagePassingReport(Report):
    fanout: int
    runs: int
    sigma: float
    sampled_max_z: float
    sampled_max_abs_error: float
    forced_max_z: float
    forced_max_abs_error: float
    forced_within_tolerance: bool
    entries: list[tuple[int, int, float, float, float]] = Field(default_factory=list, exclude=True)


def symmetric_target(adj: CompactAdj) -> np.ndarray:
    """D′^{-1/2} A′ D′^{-1/2} over the self-loop-augmented graph."""
    augmented = with_self_loops(adj)
    inv_sqrt = 1.0 / np.sqrt(augmented.degrees.astype(np.float64))
    return inv_sqrt[:, None] * augmented.to_dense() * inv_sqrt[None, :]


def audit_message_passing(
    adj: CompactAdj,
    f: int,
    runs: int,
    rng: RngStream | int | None = None,
    *,
    sigma: float | None = None,
) -> MessagePassingReport:
    """Mean Å over sampled rooted adjacencies (all nodes seeded, depth 1) vs the symmetric target.

    The sampled-self-loop form carries the verdict; the forced-self-loop
    form is measured the same way and reported.
    """
    sigma = settings.audit_sigma if sigma is None else sigma
    rng = _stream(rng)
    if adj.n > MESSAGE_PASSING_MAX_NODES:
        raise ContractViolation(
            f"the message-passing audit is meant for graphs of at most {MESSAGE_PASSING_MAX_NODES} nodes"
        )
    n = adj.n
    augmented = with_self_loops(adj)
    full_degrees = augmented.degrees.astype(np.float64)
    target = symmetric_target(adj)
    batch = np.arange(n, dtype=np.int64)

    sums = {form: np.zeros((n, n)) for form in ("sampled", "forced")}
    squares = {form: np.zeros((n, n)) for form in ("sampled", "forced")}
    for r in range(runs):
        sampled_state = sample_rooted_adjacency(augmented, batch, [f], rng.substream(7, r))
        forced_state = sample_rooted_adjacency(adj, batch, [f], rng.substream(8, r))
        for form, state in (("sampled", sampled_state), ("forced", forced_state)):
            matrix = renormalize(state, full_degrees, self_loops=form).to_full(n).toarray()
            sums[form] += matrix
            squares[form] += matrix**2

    stats = {}
    for form in sums:
        mean = sums[form] / runs
        var = np.maximum(squares[form] / runs - mean**2, 0.0) * runs / max(runs - 1, 1)
        se = np.sqrt(var / runs)
        stats[form] = (mean, se, _z_scores(mean, target, se))

    mean_s, se_s, z_s = stats["sampled"]
    mean_f, _, z_f = stats["forced"]
    rows = [
        (int(u), int(v), float(target[u, v]), float(mean_s[u, v]), float(mean_f[u, v]))
        for u, v in zip(*np.nonzero((target > 0) | (mean_s > 0) | (mean_f > 0)))
    ]
    report = MessagePassingReport(
        name="message_passing",
        passed=bool(z_s.max() <= sigma),
        fanout=f,
        runs=runs,
        sigma=sigma,
        sampled_max_z=float(z_s.max()),
        sampled_max_abs_error=float(np.abs(mean_s - target).max()),
        forced_max_z=float(z_f.max()),
        forced_max_abs_error=float(np.abs(mean_f - target).max()),
        forced_within_tolerance=bool(z_f.max() <= sigma),
        entries=rows,
    )
    logger.info(
        "Message passing f=%d: sampled max z %.3g, forced max z %.3g -> %s",
        f, report.sampled_max_z, report.forced_max_z, "pass" if report.passed else "FAIL",
    )
    return report


# ── Consolidated check ───────────────────────────────────────────────


class SkippedReport(Report):
    """A section that was not run on this graph; carries no verdict."""

    skipped: bool = True
    reason: str


class CheckReport(Report):
    checks: list[str]
    failed: list[str]
    sections: list[Report] = Field(default_factory=list, exclude=True)

    def render(self, prefix: str = "") -> str:
        lines = self.lines(prefix)
        for section in self.sections:
            lines.extend(section.lines(prefix=f"{section.name}."))
        return "\n".join(lines) + "\n"


def run_checks(
    adj: CompactAdj,
    checks: Iterable[str] = CHECKS,
    *,
    seed: int | None = None,
    fanout: int = 3,
    k: int = 2,
    runs: int | None = None,
    alpha: int = 3,
    ensemble_n: int = 6,
    ensemble_fanout: int = 1,
    ensemble_seeds: int = 5,
    window: int = 2,
    strict_bound: bool = False,
    strict_ensemble: bool = False,
    workers: int = 1,
) -> CheckReport:
    """Run the selected audits; the report fails iff any section fails."""
    seed = settings.seed if seed is None else seed
    runs = settings.audit_runs if runs is None else runs
    requested = set(checks)
    unknown = requested - set(CHECKS)
    if unknown:
        raise ContractViolation(f"unknown check(s): {sorted(unknown)}")
    checks = [c for c in CHECKS if c in requested]
    rng = RngStream(seed)
    batch = np.arange(adj.n, dtype=np.int64)
    sections: list[Report] = []

    for check in checks:
        if check == "1":
            sections.append(audit_unbiasedness(adj, batch, k, fanout, runs, rng.substream(11), workers=workers))
        elif check == "2":
            sections.append(audit_variance(
                adj, batch, k, fanout, runs, rng.substream(12), strict_bound=strict_bound, workers=workers,
            ))
        elif check == "3":
            sections.append(audit_factorization_gradient(adj, 1, fanout, runs, rng.substream(13), workers=workers))
        elif check == "4":
            sections.append(audit_deepwalk_gradient(adj, (fanout,) * k, window, runs, rng.substream(14)))
        elif check == "5":
            if adj.n > MESSAGE_PASSING_MAX_NODES:
                reason = f"graph has {adj.n} nodes, the audit runs on at most {MESSAGE_PASSING_MAX_NODES}"
                logger.warning("Skipping message-passing audit: %s", reason)
                sections.append(SkippedReport(name="message_passing", reason=reason))
            else:
                sections.append(audit_message_passing(adj, min(fanout, 2), runs, rng.substream(15)))
        elif check == "8":
            for offset in range(ensemble_seeds):
                section = ensemble_equivalence_check(
                    alpha, ensemble_n, ensemble_fanout, seed + offset, strict=strict_ensemble
                )
                sections.append(section.model_copy(update={"name": f"ensemble_seed{seed + offset}"}))
            degenerate = ensemble_equivalence_check(alpha, ensemble_n, alpha, seed, tolerance=1e-8)
            sections.append(degenerate.model_copy(update={"name": "ensemble_degenerate"}))
        elif check == "walk":
            start = int(np.argmax(adj.degrees))
            sections.append(audit_fanout_one(adj, start, 2, 10 * runs, rng.substream(16), workers=workers))

    failed = [s.name for s in sections if s.passed is False]
    report = CheckReport(
        name="check", passed=not failed, checks=checks, failed=failed, sections=sections
    )
    logger.info("Check finished: %d section(s), %d failed", len(sections), len(failed))
    return report
