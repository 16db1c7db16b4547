import numpy as np
import pytest

from app.errors import ContractViolation, EnumerationGuardError
from app.services.ensemble import ensemble_equivalence_check, whitened_features


def test_whitened_features_orthonormal():
    X = whitened_features(6, 3, np.random.default_rng(0))

    np.testing.assert_allclose(X.T @ X, np.eye(3), atol=1e-12)
    with pytest.raises(ContractViolation):
        whitened_features(2, 3, np.random.default_rng(0))


def test_enumeration_count_and_closed_form_count():
    report = ensemble_equivalence_check(3, 6, 1, seed=1)

    assert report.enumerated == 729
    assert report.closed_form_count == 216
    assert report.whitening_error < 1e-12
    assert report.baseline_gradient_norm > 0


def test_keeping_every_edge_is_exact_optimum():
    report = ensemble_equivalence_check(3, 6, 3, seed=2, tolerance=1e-8)

    assert report.enumerated == 1
    assert report.ensemble_gradient_norm <= 1e-10
    assert report.passed


def test_report_renders_all_measurements():
    report = ensemble_equivalence_check(3, 6, 1, seed=3)
    text = report.render()

    for key in ("ratio=", "ensemble_gradient_norm=", "approx_gradient_norm=", "enumerated=729"):
        assert key in text
    assert np.isfinite([report.ratio, report.approx_gradient_norm]).all()


def test_enumeration_guard():
    with pytest.raises(EnumerationGuardError):
        ensemble_equivalence_check(3, 6, 1, seed=1, limit=100)


def test_fanout_range():
    with pytest.raises(ContractViolation):
        ensemble_equivalence_check(3, 6, 4, seed=1)


def test_subsampled_ratio_has_no_verdict_by_default():
    report = ensemble_equivalence_check(3, 6, 1, seed=4)

    assert report.passed is None
    assert not report.strict
    assert not report.degenerate
    assert not report.ratio_within_tolerance
    assert report.ratio > report.tolerance


@pytest.mark.parametrize("seed, expected", [(3, True), (4, False)])
def test_strict_ratio_verdict(seed, expected):
    report = ensemble_equivalence_check(3, 6, 1, seed=seed, strict=True)

    assert report.strict
    assert report.passed is expected
    assert report.ratio_within_tolerance is expected


def test_degenerate_case_carries_verdict_without_strict():
    report = ensemble_equivalence_check(3, 6, 3, seed=4, tolerance=1e-8)

    assert report.degenerate
    assert report.passed is True
