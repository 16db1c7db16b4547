"""Graph store package."""

from app.graph.compact_adj import CompactAdj, build_compact_adj, with_self_loops
from app.graph.edge_list import EdgeList, load_edge_list, write_edge_list, write_id_map
from app.graph.generators import generate_graph, is_connected

__all__ = [
    "CompactAdj", "build_compact_adj", "with_self_loops",
    "EdgeList", "load_edge_list", "write_edge_list", "write_id_map",
    "generate_graph", "is_connected",
]


def neighbors(adj: CompactAdj, u: int):
    """The ``degrees[u]`` stored neighbours of ``u``, ascending."""
    return adj.neighbors(u)


def toy_graph() -> CompactAdj:
    """The five-node example graph: edges {0-1, 1-2, 1-3, 1-4, 3-4}."""
    edges = EdgeList(src=[0, 1, 1, 1, 3], dst=[1, 2, 3, 4, 4], n=5)
    return build_compact_adj(edges, symmetrize=True)
