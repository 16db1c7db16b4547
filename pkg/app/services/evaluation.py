"""Link prediction: held-out edge splits, negative pairs, ROC-AUC and mean rank."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from app.errors import ContractViolation, NegativeSamplingError
from app.graph.edge_list import EdgeList
from app.graph.generators import count_components
from app.reports import Report

logger = logging.getLogger(__name__)

REJECTION_FACTOR = 100


@dataclass(frozen=True, eq=False)
class LinkSplit:
    """Train / test edges (u < v) and negative pairs; negatives for test edge i
    are rows ``i * per_edge`` to ``(i + 1) * per_edge``."""

    n: int
    train: EdgeList
    test: np.ndarray
    negatives: np.ndarray
    fraction: float
    negatives_per_edge: int
    seed: int
    components_full: int
    components_train: int


@dataclass(frozen=True, eq=False)
class ScoredPairs:
    u: np.ndarray
    v: np.ndarray
    score: np.ndarray
    label: np.ndarray  # True for held-out edges
    group: np.ndarray  # index of the positive each pair is grouped with

    def __post_init__(self) -> None:
        if not np.isfinite(self.score).all():
            raise ContractViolation("scores must be finite")

    @classmethod
    def from_scores(cls, pos: np.ndarray, neg: np.ndarray) -> ScoredPairs:
        """Unpaired scores, every negative grouped with positive 0."""
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        size = pos.size + neg.size
        return cls(
            u=np.zeros(size, dtype=np.int64),
            v=np.zeros(size, dtype=np.int64),
            score=np.concatenate([pos, neg]),
            label=np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)]),
            group=np.concatenate([np.arange(pos.size), np.zeros(neg.size, dtype=np.int64)]),
        )


def _canonical_edges(edges: EdgeList) -> np.ndarray:
    lo = np.minimum(edges.src, edges.dst)
    hi = np.maximum(edges.src, edges.dst)
    keep = lo != hi
    pairs = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    return pairs.reshape(-1, 2)


def make_split(edges: EdgeList, fraction: float, negatives_per_edge: int, seed: int) -> LinkSplit:
    """Hold out ``round(fraction * m)`` undirected edges and sample non-edge negatives."""
    if not 0.0 < fraction < 1.0:
        raise ContractViolation(f"held-out fraction must be in (0, 1), got {fraction}")
    if negatives_per_edge < 1:
        raise ContractViolation("negatives_per_edge must be >= 1")
    n = edges.n
    pairs = _canonical_edges(edges)
    m = pairs.shape[0]
    n_test = int(round(fraction * m))
    if n_test < 1 or n_test >= m:
        raise ContractViolation(f"graph too small to hold out a {fraction} fraction of {m} edge(s)")

    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    test = pairs[order[:n_test]]
    train_pairs = pairs[np.sort(order[n_test:])]
    train = EdgeList(src=train_pairs[:, 0], dst=train_pairs[:, 1], n=n, directed=False)

    negatives = _sample_negatives(n, pairs, n_test * negatives_per_edge, rng)

    components_full = count_components(EdgeList(src=pairs[:, 0], dst=pairs[:, 1], n=n))
    components_train = count_components(train)
    if components_train > components_full:
        logger.warning(
            "Held-out split disconnects the graph: %d -> %d components",
            components_full, components_train,
        )
    logger.info("Split: %d train, %d test, %d negative pairs", m - n_test, n_test, negatives.shape[0])
    return LinkSplit(
        n=n,
        train=train,
        test=test,
        negatives=negatives,
        fraction=fraction,
        negatives_per_edge=negatives_per_edge,
        seed=seed,
        components_full=components_full,
        components_train=components_train,
    )


def _sample_negatives(n: int, pairs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct uniform non-edges (u < v) by rejection, at most 100·count draws."""
    available = n * (n - 1) // 2 - pairs.shape[0]
    if available < count:
        raise NegativeSamplingError(
            f"only {available} non-edge(s) available, {count} negative pair(s) requested"
        )
    edge_keys = set((pairs[:, 0] * n + pairs[:, 1]).tolist())
    chosen: dict[int, None] = {}
    attempts = 0
    while len(chosen) < count:
        if attempts >= REJECTION_FACTOR * count:
            raise NegativeSamplingError(
                f"gave up after {attempts} draws with {len(chosen)}/{count} negatives"
            )
        u, v = (int(x) for x in rng.integers(0, n, size=2))
        attempts += 1
        if u == v:
            continue
        key = min(u, v) * n + max(u, v)
        if key in edge_keys or key in chosen:
            continue
        chosen[key] = None
    keys = np.fromiter(chosen, dtype=np.int64, count=len(chosen))
    return np.stack([keys // n, keys % n], axis=1).reshape(-1, 2)


def score_pairs(Z: np.ndarray, split: LinkSplit) -> ScoredPairs:
    """⟨Z_u, Z_v⟩ for held-out edges and their grouped negatives."""
    test, neg = split.test, split.negatives
    u = np.concatenate([test[:, 0], neg[:, 0]])
    v = np.concatenate([test[:, 1], neg[:, 1]])
    score = np.einsum("ij,ij->i", Z[u], Z[v])
    group = np.concatenate([
        np.arange(test.shape[0]),
        np.arange(neg.shape[0]) // split.negatives_per_edge,
    ])
    label = np.concatenate([np.ones(test.shape[0], bool), np.zeros(neg.shape[0], bool)])
    return ScoredPairs(u=u, v=v, score=score, label=label, group=group)


def roc_auc(pairs: ScoredPairs) -> float:
    """Rank-sum AUC: P(positive outranks negative), ties count one half."""
    n_pos = int(pairs.label.sum())
    n_neg = int((~pairs.label).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("roc_auc needs at least one positive and one negative")
    ranks = rankdata(pairs.score)
    return float((ranks[pairs.label].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_rank(pairs: ScoredPairs) -> float:
    """Average 1-based rank of each positive among its group's negatives (ties averaged)."""
    ranks = []
    for g in np.unique(pairs.group):
        members = pairs.group == g
        pos = pairs.score[members & pairs.label]
        if pos.size == 0:
            raise ContractViolation(f"group {g} holds no positive")
        neg = pairs.score[members & ~pairs.label]
        for s in pos:
            ranks.append(1.0 + np.count_nonzero(neg > s) + 0.5 * np.count_nonzero(neg == s))
    if not ranks:
        raise ContractViolation("mean_rank needs at least one group")
    return float(np.mean(ranks))


class LinkPredictionReport(Report):
    roc_auc: float
    mean_rank: float
    n_test: int
    n_negatives: int
    fraction: float
    split_seed: int
    train_components: int


def evaluate_link_prediction(Z: np.ndarray, split: LinkSplit) -> LinkPredictionReport:
    pairs = score_pairs(Z, split)
    report = LinkPredictionReport(
        name="link_prediction",
        roc_auc=roc_auc(pairs),
        mean_rank=mean_rank(pairs),
        n_test=int(split.test.shape[0]),
        n_negatives=int(split.negatives.shape[0]),
        fraction=split.fraction,
        split_seed=split.seed,
        train_components=split.components_train,
    )
    logger.info("Link prediction: roc_auc=%.4f mean_rank=%.3f", report.roc_auc, report.mean_rank)
    return report
