import numpy as np
import pytest

from app.graph import EdgeList, build_compact_adj, toy_graph


@pytest.fixture
def toy_adj():
    return toy_graph()


@pytest.fixture
def two_cliques_adj():
    """Two disjoint 5-cliques (nodes 0-4 and 5-9)."""
    pairs = [(a, b) for base in (0, 5) for a in range(base, base + 5) for b in range(a + 1, base + 5)]
    src, dst = np.array(pairs).T
    return build_compact_adj(EdgeList(src=src, dst=dst, n=10))
