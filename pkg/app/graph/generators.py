"""Synthetic graph generators (Erdős–Rényi, random regular, barbell)."""

from __future__ import annotations

import logging
from typing import Literal

import networkx as nx
import numpy as np

from app.errors import InfeasibleGraphError
from app.graph.edge_list import EdgeList

logger = logging.getLogger(__name__)

GraphKind = Literal["erdos_renyi", "regular", "barbell"]
GRAPH_KINDS: tuple[str, ...] = ("erdos_renyi", "regular", "barbell")


def generate_graph(kind: GraphKind, n: int, param: float, seed: int) -> EdgeList:
    """Undirected synthetic graph as an EdgeList (each edge listed once).

    ``param`` is p for erdos_renyi, the degree for regular and the length of
    the joining path for barbell (0 joins the two cliques by a single edge).
    """
    if n < 1:
        raise InfeasibleGraphError("n must be positive")

    if kind == "erdos_renyi":
        if not 0.0 <= param <= 1.0:
            raise InfeasibleGraphError("erdos_renyi needs 0 <= p <= 1")
        # fast_gnp is O(n + m); the dense variant is faster once p is large.
        if param < 0.1:
            graph = nx.fast_gnp_random_graph(n, param, seed=seed)
        else:
            graph = nx.gnp_random_graph(n, param, seed=seed)
    elif kind == "regular":
        degree = int(param)
        if degree != param or degree < 0 or degree >= n or (degree * n) % 2:
            raise InfeasibleGraphError(
                f"no {param}-regular graph on {n} nodes (need integer d < n with d*n even)"
            )
        graph = nx.random_regular_graph(degree, n, seed=seed)
    elif kind == "barbell":
        path_len = int(param)
        clique = (n - path_len) // 2
        if path_len < 0 or clique < 2 or 2 * clique + path_len != n:
            raise InfeasibleGraphError(
                f"barbell needs n - path even with cliques of at least 2 (n={n}, path={path_len})"
            )
        graph = nx.barbell_graph(clique, path_len)
    else:
        raise InfeasibleGraphError(f"unknown graph kind: {kind}")

    connected = n == 1 or nx.is_connected(graph)
    logger.info(
        "Generated %s graph: n=%d, %d edges, connected=%s",
        kind, n, graph.number_of_edges(), connected,
    )

    edges = np.array(sorted(graph.edges()), dtype=np.int64).reshape(-1, 2)
    return EdgeList(src=edges[:, 0], dst=edges[:, 1], n=n, directed=False)


def is_connected(edges: EdgeList) -> bool:
    """Connectivity of the undirected view of ``edges`` over all n nodes."""
    graph = nx.Graph()
    graph.add_nodes_from(range(edges.n))
    graph.add_edges_from(edges.pairs())
    return nx.is_connected(graph)


def count_components(edges: EdgeList) -> int:
    graph = nx.Graph()
    graph.add_nodes_from(range(edges.n))
    graph.add_edges_from(edges.pairs())
    return nx.number_connected_components(graph)
