import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import roc_auc_score

from app.errors import ContractViolation, NegativeSamplingError
from app.graph import EdgeList
from app.services.evaluation import (
    ScoredPairs,
    evaluate_link_prediction,
    make_split,
    mean_rank,
    roc_auc,
)

TOY_EDGES = EdgeList(src=[0, 1, 1, 1, 3], dst=[1, 2, 3, 4, 4], n=5)


def _two_cliques() -> EdgeList:
    pairs = [(a, b) for base in (0, 5) for a in range(base, base + 5) for b in range(a + 1, base + 5)]
    src, dst = np.array(pairs).T
    return EdgeList(src=src, dst=dst, n=10)


# ── Split ────────────────────────────────────────────────────────────


def test_split_sizes_and_disjointness():
    split = make_split(TOY_EDGES, 0.2, 1, seed=3)

    assert split.test.shape == (1, 2)
    assert split.train.m == 4
    assert split.negatives.shape == (1, 2)
    held = tuple(split.test[0])
    assert held not in set(split.train.pairs())
    u, v = split.negatives[0]
    assert u < v
    assert (u, v) not in {(0, 1), (1, 2), (1, 3), (1, 4), (3, 4)}


def test_split_reproducible():
    a = make_split(_two_cliques(), 0.3, 2, seed=11)
    b = make_split(_two_cliques(), 0.3, 2, seed=11)

    assert np.array_equal(a.test, b.test)
    assert np.array_equal(a.negatives, b.negatives)
    assert a.negatives.shape == (2 * a.test.shape[0], 2)


def test_split_rejects_bad_fraction():
    with pytest.raises(ContractViolation):
        make_split(TOY_EDGES, 0.0, 1, seed=1)
    with pytest.raises(ContractViolation, match="too small"):
        make_split(TOY_EDGES, 0.05, 1, seed=1)
    with pytest.raises(ContractViolation):
        make_split(TOY_EDGES, 0.2, 0, seed=1)


def test_split_without_non_edges():
    complete = EdgeList(src=[0, 0, 0, 1, 1, 2], dst=[1, 2, 3, 2, 3, 3], n=4)

    with pytest.raises(NegativeSamplingError):
        make_split(complete, 0.5, 1, seed=1)


# ── Metrics ──────────────────────────────────────────────────────────


def test_auc_extremes():
    assert roc_auc(ScoredPairs.from_scores([2.0, 3.0], [0.0, 1.0])) == 1.0
    assert roc_auc(ScoredPairs.from_scores([0.0], [1.0, 2.0])) == 0.0
    assert roc_auc(ScoredPairs.from_scores([1.0], [1.0])) == 0.5


def test_auc_needs_both_labels():
    with pytest.raises(ContractViolation):
        roc_auc(ScoredPairs.from_scores([1.0], []))


def test_scores_must_be_finite():
    with pytest.raises(ContractViolation):
        ScoredPairs.from_scores([np.nan], [0.0])


@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
)
@settings(max_examples=60, deadline=None)
def test_auc_matches_sklearn(pos, neg):
    pairs = ScoredPairs.from_scores(pos, neg)
    expected = roc_auc_score(pairs.label.astype(int), pairs.score)

    assert roc_auc(pairs) == pytest.approx(expected, abs=1e-12)


@given(
    st.lists(st.integers(-50, 50), min_size=1, max_size=30),
    st.lists(st.integers(-50, 50), min_size=1, max_size=30),
)
@settings(max_examples=60, deadline=None)
def test_auc_invariant_under_increasing_maps(pos, neg):
    base = roc_auc(ScoredPairs.from_scores(pos, neg))
    shifted = roc_auc(ScoredPairs.from_scores([2 * x + 1 for x in pos], [2 * x + 1 for x in neg]))

    assert base == shifted
    assert 0.0 <= base <= 1.0


def test_mean_rank_groups_and_ties():
    pairs = ScoredPairs(
        u=np.zeros(5, dtype=np.int64),
        v=np.zeros(5, dtype=np.int64),
        score=np.array([0.9, 0.2, 0.5, 0.95, 0.2]),
        label=np.array([True, True, False, False, False]),
        group=np.array([0, 1, 0, 0, 1]),
    )
    # group 0: one negative above 0.9; group 1: one tie
    assert mean_rank(pairs) == pytest.approx((2.0 + 1.5) / 2)


def test_separable_embeddings_score_perfectly():
    split = make_split(_two_cliques(), 0.2, 1, seed=5)
    Z = np.zeros((10, 2))
    Z[:5, 0] = 1.0
    Z[5:, 1] = 1.0
    report = evaluate_link_prediction(Z, split)

    assert report.roc_auc == 1.0
    assert report.mean_rank == 1.0
    assert report.n_test == 4
    assert "roc_auc=1" in report.render()
