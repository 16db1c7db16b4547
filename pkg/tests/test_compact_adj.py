import tempfile
from pathlib import Path

import numpy as np
import pytest

from app.errors import MalformedInputError
from app.graph import EdgeList, build_compact_adj, neighbors, with_self_loops
from app.graph.compact_adj import CompactAdj


def test_toy_graph_layout(toy_adj):
    assert toy_adj.degrees.tolist() == [1, 4, 1, 2, 2]
    rows = [neighbors(toy_adj, u).tolist() for u in range(5)]
    assert rows == [[1], [0, 2, 3, 4], [1], [1, 4], [1, 3]]
    assert toy_adj.m == 10


def test_single_node_gets_self_loop():
    adj = build_compact_adj(EdgeList(src=[], dst=[], n=1))

    assert adj.degrees.tolist() == [1]
    assert neighbors(adj, 0).tolist() == [0]
    assert adj.self_loops_added == 1


def test_directed_chain_without_symmetrize():
    adj = build_compact_adj(EdgeList(src=[0, 1], dst=[1, 2], n=3, directed=True), symmetrize=False)

    assert adj.degrees.tolist() == [1, 1, 1]
    assert [neighbors(adj, u).tolist() for u in range(3)] == [[1], [2], [2]]


def test_duplicates_counted():
    adj = build_compact_adj(EdgeList(src=[0, 0, 1], dst=[1, 1, 0], n=2))

    assert adj.degrees.tolist() == [1, 1]
    assert adj.duplicates_removed == 4


def test_out_of_range_node():
    with pytest.raises(MalformedInputError, match="outside declared n"):
        build_compact_adj(EdgeList(src=[0], dst=[5], n=3))


def test_neighbors_out_of_range(toy_adj):
    with pytest.raises(MalformedInputError):
        neighbors(toy_adj, 5)


def test_arrays_read_only(toy_adj):
    with pytest.raises(ValueError):
        toy_adj.pool[0] = 3


def test_has_edges(toy_adj):
    hits = toy_adj.has_edges(np.array([0, 1, 2, 3]), np.array([1, 4, 3, 4]))
    assert hits.tolist() == [True, True, False, True]


def test_scipy_view_matches_dense(toy_adj):
    dense = toy_adj.to_dense()
    assert dense.sum() == 10
    assert np.array_equal(dense, dense.T)
    assert dense[1].tolist() == [1, 0, 1, 1, 1]


def test_nbytes_counts_three_arrays(toy_adj):
    assert toy_adj.nbytes == 8 * (5 + 6 + 10)


def test_with_self_loops(toy_adj):
    augmented = with_self_loops(toy_adj)

    assert augmented.degrees.tolist() == [2, 5, 2, 3, 3]
    assert neighbors(augmented, 1).tolist() == [0, 1, 2, 3, 4]


def test_snapshot_save_load(toy_adj):
    with tempfile.TemporaryDirectory() as tmp:
        path = toy_adj.save(Path(tmp) / "toy.gttf")
        loaded = CompactAdj.load(path)

        assert loaded.degrees.tolist() == toy_adj.degrees.tolist()
        assert loaded.pool.tolist() == toy_adj.pool.tolist()
        assert loaded.offsets.tolist() == toy_adj.offsets.tolist()


def test_snapshot_rejects_garbage():
    with tempfile.TemporaryDirectory() as tmp:
        bad = Path(tmp) / "bad.gttf"
        bad.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(MalformedInputError, match="not a CompactAdj"):
            CompactAdj.load(bad)

        truncated = Path(tmp) / "short.gttf"
        truncated.write_bytes(b"GTTF1" + b"\0" * 8)
        with pytest.raises(MalformedInputError, match="truncated"):
            CompactAdj.load(truncated)
