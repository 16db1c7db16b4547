"""Desk-scale check that training a linear GCN on sampled adjacencies matches the ensemble.

Every per-node choice of f neighbours is enumerated on a small α-regular
graph; each choice yields a sampled adjacency, normalized symmetrically, and
its own least-squares weights. The expected-loss gradient of a model fed a
uniformly chosen sampled adjacency is then evaluated at the averaged weights.

The equivalence rests on Å_cÅ_c ≈ I/(2f+1), which only holds for large
sparse graphs. On six nodes the gradient ratio lands around 0.1 to 0.35
depending on the seed, so for f < α the ratio is reported without a verdict
unless ``strict`` is set. Keeping every edge (f = α) leaves one adjacency
whose averaged weights are the exact optimum; that case always carries one.
"""

from __future__ import annotations

import itertools
import logging
import math

import numpy as np

from app.config import settings
from app.errors import ContractViolation, EnumerationGuardError, InfeasibleGraphError
from app.graph.compact_adj import build_compact_adj
from app.graph.generators import generate_graph, is_connected
from app.reports import Report
from app.services.learning import LinearGcnModel, linear_gcn_forward, propagate

logger = logging.getLogger(__name__)

_CONNECT_ATTEMPTS = 100


class EnsembleReport(Report):
    alpha: int
    n: int
    fanout: int
    seed: int
    enumerated: int
    closed_form_count: int
    ensemble_gradient_norm: float
    baseline_gradient_norm: float
    ratio: float
    tolerance: float
    ratio_within_tolerance: bool
    degenerate: bool
    strict: bool
    approx_gradient_norm: float
    whitening_error: float


def whitened_features(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n x d with orthonormal columns (XᵀX = I), from the QR factor of a Gaussian matrix."""
    if d > n:
        raise ContractViolation(f"cannot whiten {d} features over {n} nodes")
    q, _ = np.linalg.qr(rng.standard_normal((n, d)))
    return q


def _regular_connected(alpha: int, n: int, seed: int) -> np.ndarray:
    for attempt in range(_CONNECT_ATTEMPTS):
        edges = generate_graph("regular", n, alpha, seed + attempt)
        if is_connected(edges):
            return build_compact_adj(edges).to_dense()
    raise InfeasibleGraphError(f"no connected {alpha}-regular graph on {n} nodes after {_CONNECT_ATTEMPTS} tries")


def ensemble_equivalence_check(
    alpha: int,
    n: int,
    f: int,
    seed: int,
    *,
    features: int | None = None,
    targets: int = 2,
    tolerance: float = 0.2,
    strict: bool = False,
    limit: int | None = None,
) -> EnsembleReport:
    """Gradient norm at the averaged weights relative to a random W.

    ``passed`` is the ratio verdict when f = α or ``strict`` is set, None otherwise.
    """
    if not 1 <= f <= alpha:
        raise ContractViolation(f"fanout must satisfy 1 <= f <= alpha (got f={f}, alpha={alpha})")
    limit = settings.enumeration_limit if limit is None else limit
    rng = np.random.default_rng(seed)

    A = _regular_connected(alpha, n, seed)
    neighbours = [np.flatnonzero(A[u]) for u in range(n)]
    choices = [list(itertools.combinations(row.tolist(), f)) for row in neighbours]
    enumerated = math.prod(len(c) for c in choices)
    if enumerated > limit:
        raise EnumerationGuardError(f"{enumerated} sampled adjacencies exceed the limit {limit}")

    d_in = features or max(1, n // 2)
    X = whitened_features(n, d_in, rng)
    Y = rng.standard_normal((n, targets))
    whitening_error = float(np.abs(X.T @ X - np.eye(d_in)).max())

    layer = LinearGcnModel(np.zeros((d_in, targets)), normalization="symmetric")
    normalized: list[np.ndarray] = []
    propagated: list[np.ndarray] = []
    w_sum = np.zeros((d_in, targets))
    xay = np.zeros((d_in, targets))
    for combo in itertools.product(*choices):
        sampled = np.zeros((n, n))
        for u, picked in enumerate(combo):
            sampled[u, list(picked)] = 1.0
        A_norm = layer.normalize(sampled)
        M = propagate(A_norm, X)
        normalized.append(A_norm)
        propagated.append(M)
        w_sum += np.linalg.lstsq(M, Y, rcond=None)[0]
        xay += X.T @ A_norm @ Y
    xay /= enumerated
    w_ens = w_sum / enumerated

    def gradient(W: np.ndarray) -> np.ndarray:
        """∂/∂W E_c[½‖Y - Å_c X W‖²] = E_c[(Å_c X)ᵀ(H_c - Y)]."""
        model = LinearGcnModel(W, normalization="symmetric")
        total = np.zeros_like(W)
        for A_norm, M in zip(normalized, propagated):
            total += M.T @ (linear_gcn_forward(model, A_norm, X) - Y)
        return total / enumerated

    baseline = rng.standard_normal((d_in, targets))
    ens_norm = float(np.linalg.norm(gradient(w_ens)))
    base_norm = float(np.linalg.norm(gradient(baseline)))
    ratio = ens_norm / base_norm if base_norm > 0 else 0.0
    approx_norm = float(np.linalg.norm(w_ens / (2 * f + 1) - xay))

    degenerate = f == alpha
    within = ratio <= tolerance
    report = EnsembleReport(
        name="ensemble",
        passed=within if (strict or degenerate) else None,
        alpha=alpha,
        n=n,
        fanout=f,
        seed=seed,
        enumerated=enumerated,
        closed_form_count=n ** math.comb(alpha, f),
        ensemble_gradient_norm=ens_norm,
        baseline_gradient_norm=base_norm,
        ratio=ratio,
        tolerance=tolerance,
        ratio_within_tolerance=within,
        degenerate=degenerate,
        strict=strict,
        approx_gradient_norm=approx_norm,
        whitening_error=whitening_error,
    )
    logger.info(
        "Ensemble alpha=%d n=%d f=%d: %d adjacencies, ratio %.4g (tolerance %.3g, %s)",
        alpha, n, f, enumerated, ratio, tolerance,
        "within" if within else "above",
    )
    if not within and report.passed is None:
        logger.warning("Ensemble ratio %.4g above %.3g at seed %d; reported without a verdict", ratio, tolerance, seed)
    return report
