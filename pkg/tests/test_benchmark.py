import pytest

from app.services.benchmark import bench_traverse, storage_audit


def test_storage_linear_in_nodes_and_edges():
    report = storage_audit(sizes=(50, 100, 200), degrees=(2.0, 4.0), seed=3)

    assert report.passed
    assert report.r_squared == pytest.approx(1.0)
    # int64 degrees + offsets per node, one int64 per stored neighbour
    assert report.c_nodes == pytest.approx(16.0, abs=1e-6)
    assert report.c_edges == pytest.approx(8.0, abs=1e-6)
    assert len(report.rows) == 6


def test_bench_rows_without_verdict():
    report = bench_traverse([50, 200], batch_size=8, fanouts=(2, 2), repeats=2, seed=1)

    assert [row[0] for row in report.rows] == [50, 200]
    assert report.ratio is not None and report.ratio > 0
    assert report.passed is None


def test_bench_single_size():
    report = bench_traverse([30], batch_size=4, repeats=1)

    assert report.ratio is None
    assert report.passed is None
