import numpy as np
import pytest

from app.errors import ContractViolation
from app.graph import generate_graph, build_compact_adj
from app.services.audits import (
    audit_deepwalk_gradient,
    audit_factorization_gradient,
    audit_message_passing,
    deepwalk_pair_weights,
    run_checks,
    symmetric_target,
)
from app.services.estimators import dense_transition


def test_symmetric_target(toy_adj):
    target = symmetric_target(toy_adj)

    np.testing.assert_allclose(target, target.T)
    assert target[0, 0] == pytest.approx(0.5)
    assert target[0, 1] == pytest.approx(1 / np.sqrt(10))


def test_pair_weights_depth_one(toy_adj):
    T = dense_transition(toy_adj)
    M = deepwalk_pair_weights(T, np.array([1]), (3,), window=1)

    # three children of seed 1, each paired with the seed at weight 1
    np.testing.assert_allclose(M[1], 3 * T[1])
    assert M.sum() == pytest.approx(3.0)


def test_factorization_gradient_audit(toy_adj):
    report = audit_factorization_gradient(toy_adj, 1, 3, 10_000, rng=3)

    assert report.passed
    assert max(report.relative_error_L, report.relative_error_R) <= 0.02


def test_deepwalk_gradient_audit(toy_adj):
    report = audit_deepwalk_gradient(toy_adj, (2, 2), 2, 3000, rng=4)

    assert report.touched_rows == 5
    assert report.max_z_score < 5


def test_deepwalk_gradient_audit_random_graph():
    adj = build_compact_adj(generate_graph("erdos_renyi", 20, 0.3, seed=0))
    report = audit_deepwalk_gradient(adj, (3, 3), 2, 10_000, rng=4)

    assert report.passed
    assert report.max_row_relative_error <= 0.05


def test_message_passing_sampled_self_loops_unbiased(toy_adj):
    report = audit_message_passing(toy_adj, 2, 2000, rng=5)

    assert report.passed
    assert report.sampled_max_z <= report.sigma
    assert len(report.entries) > 0


def test_message_passing_refuses_large_graphs():
    big = build_compact_adj(generate_graph("erdos_renyi", 150, 0.05, seed=1))

    with pytest.raises(ContractViolation):
        audit_message_passing(big, 2, 1)


def test_run_checks_rejects_unknown(toy_adj):
    with pytest.raises(ContractViolation, match="unknown"):
        run_checks(toy_adj, ["2", "9"], runs=10)


def test_run_checks_variance_section(toy_adj):
    report = run_checks(toy_adj, ["2"], seed=1, fanout=2, k=1, runs=1000)

    assert report.checks == ["2"]
    assert report.passed
    text = report.render()
    assert "variance.bound=0.125" in text
    assert "failed=" in text


def test_run_checks_ensemble_sections(toy_adj):
    report = run_checks(toy_adj, ["8"], seed=1, ensemble_seeds=2)
    names = [line.split(".")[0] for line in report.render().splitlines() if "." in line.split("=")[0]]

    assert set(names) == {"ensemble_seed1", "ensemble_seed2", "ensemble_degenerate"}
    assert report.passed
    assert not report.failed


def test_run_checks_ensemble_strict_fails_above_tolerance(toy_adj):
    report = run_checks(toy_adj, ["8"], seed=4, ensemble_seeds=1, strict_ensemble=True)

    assert report.passed is False
    assert report.failed == ["ensemble_seed4"]


def test_run_checks_skips_message_passing_on_large_graphs():
    big = build_compact_adj(generate_graph("erdos_renyi", 120, 0.05, seed=1))
    report = run_checks(big, ["5"], seed=1, runs=10)
    section = report.sections[0]

    assert section.name == "message_passing"
    assert section.skipped
    assert section.passed is None
    assert report.passed
    assert "message_passing.reason=graph has 120 nodes" in report.render()
