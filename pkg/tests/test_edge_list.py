"""Tests for the edge-list loader."""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from app.errors import MalformedInputError
from app.graph.edge_list import load_edge_list, write_edge_list, write_id_map


def _write(text: str, suffix: str = ".tsv") -> Path:
    with tempfile.NamedTemporaryFile("w", suffix=suffix, delete=False, encoding="utf-8") as f:
        f.write(text)
        return Path(f.name)


def test_load_tsv():
    """Two tab-separated edges give n = 3."""
    path = _write("0\t1\n1\t2\n")
    edges = load_edge_list(path)

    assert edges.m == 2
    assert edges.n == 3
    assert edges.pairs() == [(0, 1), (1, 2)]
    assert edges.labels is None

    path.unlink()


def test_comment_lines_skipped():
    path = _write("# source target\n0\t1\n\n# trailing\n1\t2\n")
    edges = load_edge_list(path)

    assert edges.m == 2

    path.unlink()


def test_csv_and_space_formats():
    csv_path = _write("0,1\n2,1\n", suffix=".csv")
    space_path = _write("0 1\n2   1\n", suffix=".txt")

    assert load_edge_list(csv_path).pairs() == [(0, 1), (2, 1)]
    assert load_edge_list(space_path).pairs() == [(0, 1), (2, 1)]

    csv_path.unlink()
    space_path.unlink()


def test_map_ids_first_seen_order():
    """String labels are remapped densely in first-seen order."""
    path = _write("alice\tbob\ncarol\talice\n")
    edges = load_edge_list(path, map_ids=True)

    assert edges.labels == ["alice", "bob", "carol"]
    assert edges.n == 3
    assert edges.pairs() == [(0, 1), (2, 0)]

    path.unlink()


def test_string_ids_without_map_ids():
    path = _write("alice\tbob\n")

    with pytest.raises(MalformedInputError, match="--map-ids"):
        load_edge_list(path)

    path.unlink()


def test_bad_field_count():
    path = _write("0\t1\t2\t3\n")

    with pytest.raises(MalformedInputError, match=":1:"):
        load_edge_list(path)

    path.unlink()


def test_negative_id():
    path = _write("0\t-1\n")

    with pytest.raises(MalformedInputError, match="negative"):
        load_edge_list(path)

    path.unlink()


def test_self_loops_dropped_and_counted():
    path = _write("0\t0\n0\t1\n")
    edges = load_edge_list(path)

    assert edges.m == 1
    assert edges.self_loops_dropped == 1

    kept = load_edge_list(path, allow_self_loops=True)
    assert kept.m == 2

    path.unlink()


def test_weighted_lines():
    path = _write("0\t1\t0.5\n1\t2\t2\n")
    edges = load_edge_list(path)

    np.testing.assert_allclose(edges.weights, [0.5, 2.0])

    mixed = _write("0\t1\t0.5\n1\t2\n")
    with pytest.raises(MalformedInputError, match="mixed"):
        load_edge_list(mixed)

    path.unlink()
    mixed.unlink()


def test_empty_file():
    path = _write("# nothing here\n")

    with pytest.raises(MalformedInputError, match="no edges"):
        load_edge_list(path)

    path.unlink()


def test_write_then_load():
    source = _write("0\t1\n1\t2\n2\t0\n")
    edges = load_edge_list(source)

    with tempfile.TemporaryDirectory() as tmp:
        out = write_edge_list(edges, Path(tmp) / "copy.tsv")
        again = load_edge_list(out)
        assert again.pairs() == edges.pairs()
        assert again.n == edges.n

        id_map = write_id_map(["x", "y"], Path(tmp) / "ids.tsv")
        assert id_map.read_text().splitlines() == ["0\tx", "1\ty"]

    source.unlink()
