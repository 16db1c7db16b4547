"""Stochastic traversal functional producing walk forests.

Every seed in the batch grows an f-ary tree: at each depth every walker asks
the bias callback for transition mass over its neighbours, stops if the mass
is zero, otherwise draws ``F[depth]`` children with replacement (or without,
on request) and hands each child to the accumulate callback.

The recursion runs level by level over the whole frontier. Randomness comes
from a counter-based hash of (seed, tree id, depth, slot), so a walker's draws
never depend on scheduling, chunking or worker count.
"""

from __future__ import annotations

import abc
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from app.config import settings
from app.errors import ContractViolation
from app.graph.compact_adj import CompactAdj

logger = logging.getLogger(__name__)

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

_DRAW = 0
_KEY = 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


class RngStream:
    """64-bit seeded source of per-walker substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def uniforms(self, *keys: np.ndarray | int) -> np.ndarray:
        """Uniform [0, 1) values, one per broadcast key tuple."""
        arrays = np.broadcast_arrays(*(np.asarray(k, dtype=np.int64) for k in keys))
        with np.errstate(over="ignore"):
            h = _mix(np.full(arrays[0].shape, self.seed, dtype=np.uint64))
            for key in arrays:
                h = _mix(h ^ (key.astype(np.uint64) + _GOLDEN))
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def generator(self, *key: int) -> np.random.Generator:
        """Independent numpy Generator for the substream named by ``key``."""
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def substream(self, *key: int) -> RngStream:
        """Child stream for an independent group of trees (e.g. a block of Monte-Carlo runs)."""
        return RngStream(int(self.generator(*key).integers(0, 2**63)))


# ── Callback contracts ───────────────────────────────────────────────


@dataclass(frozen=True)
class TraversalStep:
    """One level of newly sampled children, one row per child.

    ``paths`` row i is the walk T from the seed to the child's parent (the
    child excluded); ``path_index`` holds the forest indices of those nodes.
    """

    paths: np.ndarray
    path_index: np.ndarray
    nodes: np.ndarray
    node_index: np.ndarray
    fanout: int
    depth: int
    tree: np.ndarray

    def __len__(self) -> int:
        return int(self.nodes.shape[0])


class Accumulator(abc.ABC):
    """AccumulateFn with private buffers per canonical work unit.

    ``fork`` returns an empty accumulator sharing configuration; ``merge``
    folds a forked accumulator back in. Merges happen in canonical chunk
    order, so floating-point sums are reproducible.
    """

    @abc.abstractmethod
    def __call__(self, step: TraversalStep) -> None: ...

    @abc.abstractmethod
    def fork(self) -> Accumulator: ...

    @abc.abstractmethod
    def merge(self, other: Accumulator) -> None: ...


class Bias(abc.ABC):
    """BiasFn: unnormalized mass over each walker's neighbours.

    ``walks`` has one row per walker, ending with the node being expanded.
    The result is flat, aligned with the concatenated neighbour rows of
    ``walks[:, -1]``. An all-zero segment prunes that walker.
    """

    # Stateful biases see walkers in canonical order and force sequential runs.
    stateful: bool = False

    @abc.abstractmethod
    def __call__(self, walks: np.ndarray, adj: CompactAdj) -> np.ndarray: ...


AccumulateFn = Accumulator | Callable[[TraversalStep], None]
BiasFn = Bias | Callable[[np.ndarray, CompactAdj], np.ndarray]


# ── Walk forest ──────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class WalkForest:
    """Flat forest arrays; ``parent`` is -1 for roots, ``slot`` is the
    position of a node among the ``∏F[:depth]`` slots of its tree level."""

    batch: np.ndarray
    fanouts: tuple[int, ...]
    node: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    tree: np.ndarray
    slot: np.ndarray

    @property
    def size(self) -> int:
        return int(self.node.shape[0])

    @property
    def num_nonroot(self) -> int:
        return int(np.count_nonzero(self.parent >= 0))

    @property
    def num_trees(self) -> int:
        return int(self.batch.shape[0])

    def seed_tree(self, u: int) -> int:
        """Tree id of the first tree seeded at ``u``."""
        hits = np.flatnonzero(self.batch == u)
        if hits.size == 0:
            raise ContractViolation(f"node {u} is not a seed of this forest")
        return int(hits[0])

    def level(self, tree: int, k: int) -> np.ndarray:
        """Nodes at depth ``k`` of tree ``tree`` in slot order."""
        mask = (self.tree == tree) & (self.depth == k)
        order = np.argsort(self.slot[mask], kind="stable")
        return self.node[mask][order]

    def omega(self, u: int, k: int, i: int) -> int:
        """The i-th node at depth k of the tree rooted at seed u."""
        return int(self.level(self.seed_tree(u), k)[i])

    def depth_counts(self, k: int, n: int) -> sp.csr_matrix:
        """(trees x n) counts of nodes at depth k."""
        mask = self.depth == k
        data = np.ones(int(mask.sum()), dtype=np.float64)
        counts = sp.coo_matrix(
            (data, (self.tree[mask], self.node[mask])), shape=(self.num_trees, n)
        )
        return counts.tocsr()

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(parent node, child node) for every non-root forest node."""
        child = np.flatnonzero(self.parent >= 0)
        return self.node[self.parent[child]], self.node[child]

    def dump(self, path: Path | str) -> Path:
        """Text dump: ``tree_id<TAB>depth<TAB>slot<TAB>node<TAB>parent_slot``."""
        path = Path(path)
        parent_slot = np.where(self.parent >= 0, self.slot[np.maximum(self.parent, 0)], -1)
        order = np.lexsort((self.slot, self.depth, self.tree))
        with open(path, "w", encoding="utf-8") as handle:
            for i in order.tolist():
                handle.write(
                    f"{self.tree[i]}\t{self.depth[i]}\t{self.slot[i]}\t"
                    f"{self.node[i]}\t{parent_slot[i]}\n"
                )
        return path


def walk_forest_counts(forest: WalkForest, u: int, k: int, v: int) -> int:
    """Σ_i 1[Ω(u, k, i) = v] over the tree seeded at u."""
    if k > len(forest.fanouts):
        raise ContractViolation(f"depth {k} exceeds traversal depth {len(forest.fanouts)}")
    tree = forest.seed_tree(u)
    mask = (forest.tree == tree) & (forest.depth == k) & (forest.node == v)
    return int(np.count_nonzero(mask))


# ── Categorical sampling ─────────────────────────────────────────────


def sample(
    candidates: Sequence[int] | np.ndarray,
    weights: Sequence[float] | np.ndarray,
    f: int,
    rng: np.random.Generator | None = None,
    *,
    draws: Sequence[float] | np.ndarray | None = None,
    tolerance: float | None = None,
) -> np.ndarray:
    """Draw ``f`` candidates i.i.d. from normalized ``weights``.

    Cumulative sum, then each uniform draw picks the first index whose
    cumulative mass exceeds it (half-open intervals: zero-weight candidates
    are never selected).
    """
    candidates = np.asarray(candidates)
    weights = np.asarray(weights, dtype=np.float64)
    tolerance = settings.sampling_tolerance if tolerance is None else tolerance
    if candidates.size == 0:
        raise ContractViolation("cannot sample from an empty candidate list")
    if weights.shape != candidates.shape:
        raise ContractViolation("weights must align with candidates")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise ContractViolation("weights must be finite and non-negative")
    if abs(float(weights.sum()) - 1.0) > tolerance:
        raise ContractViolation(f"weights sum to {weights.sum()!r}, expected 1")

    if draws is None:
        if rng is None:
            raise ContractViolation("either rng or draws is required")
        draws = rng.random(f)
    draws = np.asarray(draws, dtype=np.float64)

    cumulative = np.cumsum(weights)
    idx = np.searchsorted(cumulative, draws, side="right")
    last = int(np.flatnonzero(weights > 0)[-1])
    return candidates[np.minimum(idx, last)]


def _segment_layout(adj: CompactAdj, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start of each walker's neighbour row in the flat candidate array, and lengths."""
    lengths = adj.degrees[nodes]
    starts = np.zeros(nodes.shape[0], dtype=np.int64)
    np.cumsum(lengths[:-1], out=starts[1:])
    return starts, lengths


def gather_candidates(adj: CompactAdj, nodes: np.ndarray) -> np.ndarray:
    """Concatenated neighbour rows of ``nodes`` (the layout bias weights follow)."""
    starts, lengths = _segment_layout(adj, nodes)
    flat = np.repeat(adj.offsets[nodes] - starts, lengths) + np.arange(int(lengths.sum()))
    return adj.pool[flat]


def _local_positions(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    total = int(lengths.sum())
    return np.arange(total, dtype=np.int64) - np.repeat(starts, lengths)


def _draw_with_replacement(
    weights: np.ndarray,
    starts: np.ndarray,
    lengths: np.ndarray,
    totals: np.ndarray,
    draws: np.ndarray,
) -> np.ndarray:
    """Segmented cumulative-sum search; returns local indices, shape of ``draws``."""
    if starts.shape[0] == 0:
        return np.zeros(draws.shape, dtype=np.int64)
    norm = weights / np.repeat(totals, lengths)
    running = np.cumsum(norm)
    base = np.concatenate([[0.0], running])[starts]
    within = running - np.repeat(base, lengths)
    # Segment i occupies exactly (i, i + 1].
    within[starts + lengths - 1] = 1.0
    seg_id = np.repeat(np.arange(starts.shape[0], dtype=np.float64), lengths)
    position = seg_id + within
    targets = np.arange(starts.shape[0], dtype=np.float64)[:, None] + draws
    idx = np.searchsorted(position, targets.ravel(), side="right").reshape(draws.shape)
    local = idx - starts[:, None]

    local_pos = _local_positions(starts, lengths)
    last_positive = np.maximum.reduceat(np.where(weights > 0, local_pos, -1), starts)
    return np.minimum(np.maximum(local, 0), last_positive[:, None])


def _draw_without_replacement(
    weights: np.ndarray,
    starts: np.ndarray,
    lengths: np.ndarray,
    f: int,
    keys_u: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted top-f by exponential keys; returns (walker row, local index, rank)."""
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0, np.log(keys_u) / np.where(weights > 0, weights, 1.0), -np.inf)
    seg = np.repeat(np.arange(starts.shape[0]), lengths)
    order = np.lexsort((-keys, seg))
    rank = np.empty_like(order)
    rank[order] = _local_positions(starts, lengths)
    chosen = (rank < f) & (weights > 0)
    return seg[chosen], _local_positions(starts, lengths)[chosen], rank[chosen]


# ── Traverse ─────────────────────────────────────────────────────────


@dataclass
class _ChunkForest:
    node: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    tree: np.ndarray
    slot: np.ndarray


def _traverse_chunk(
    adj: CompactAdj,
    seeds: np.ndarray,
    tree_ids: np.ndarray,
    fanouts: tuple[int, ...],
    accumulate: AccumulateFn | None,
    bias: BiasFn | None,
    rng: RngStream,
    replace: bool,
) -> _ChunkForest:
    b = seeds.shape[0]
    nodes_out = [seeds.astype(np.int64)]
    parent_out = [np.full(b, -1, dtype=np.int64)]
    depth_out = [np.zeros(b, dtype=np.int64)]
    tree_out = [tree_ids.astype(np.int64)]
    slot_out = [np.zeros(b, dtype=np.int64)]

    walks = seeds.astype(np.int64)[:, None]
    walk_index = np.arange(b, dtype=np.int64)[:, None]
    tree = tree_ids.astype(np.int64)
    slot = np.zeros(b, dtype=np.int64)
    next_index = b

    for d, f in enumerate(fanouts):
        if walks.shape[0] == 0:
            break
        current = walks[:, -1]
        starts, lengths = _segment_layout(adj, current)

        if bias is None:
            weights = None
            alive = np.arange(current.shape[0])
        else:
            weights = np.asarray(bias(walks, adj), dtype=np.float64)
            if weights.shape != (int(lengths.sum()),):
                raise ContractViolation(
                    f"bias returned {weights.shape[0]} weights for {int(lengths.sum())} candidates"
                )
            if (weights < 0).any() or not np.isfinite(weights).all():
                raise ContractViolation("bias weights must be finite and non-negative")
            totals = np.add.reduceat(weights, starts) if weights.size else np.zeros(0)
            alive = np.flatnonzero(totals > 0)

        if weights is not None and alive.shape[0] < current.shape[0]:
            keep = np.repeat(np.isin(np.arange(current.shape[0]), alive), lengths)
            weights = weights[keep]
            totals = totals[alive]
            starts, lengths = _segment_layout(adj, current[alive])

        a_tree, a_slot = tree[alive], slot[alive]
        if replace:
            child_slot = a_slot[:, None] * f + np.arange(f)[None, :]
            draws = rng.uniforms(_DRAW, a_tree[:, None], d + 1, child_slot)
            if weights is None:
                local = np.minimum(
                    np.floor(draws * lengths[alive][:, None]).astype(np.int64),
                    lengths[alive][:, None] - 1,
                )
            else:
                local = _draw_with_replacement(weights, starts, lengths, totals, draws)
            rows = np.repeat(np.arange(alive.shape[0]), f)
            local = local.ravel()
            child_slot = child_slot.ravel()
        else:
            if weights is None:
                weights = np.ones(int(lengths.sum()))
            seg = np.repeat(np.arange(alive.shape[0]), lengths)
            cand = _local_positions(starts, lengths)
            keys_u = rng.uniforms(_KEY, a_tree[seg], d + 1, a_slot[seg], cand)
            rows, local, rank = _draw_without_replacement(weights, starts, lengths, f, keys_u)
            child_slot = a_slot[rows] * f + rank

        parent_rows = alive[rows]
        children = adj.pool[adj.offsets[current[parent_rows]] + local]
        count = children.shape[0]
        child_index = np.arange(next_index, next_index + count, dtype=np.int64)
        next_index += count

        nodes_out.append(children)
        parent_out.append(walk_index[parent_rows, -1])
        depth_out.append(np.full(count, d + 1, dtype=np.int64))
        tree_out.append(tree[parent_rows])
        slot_out.append(child_slot.astype(np.int64))

        if accumulate is not None and count:
            accumulate(
                TraversalStep(
                    paths=walks[parent_rows],
                    path_index=walk_index[parent_rows],
                    nodes=children,
                    node_index=child_index,
                    fanout=f,
                    depth=d + 1,
                    tree=tree[parent_rows],
                )
            )

        walks = np.hstack([walks[parent_rows], children[:, None]])
        walk_index = np.hstack([walk_index[parent_rows], child_index[:, None]])
        tree = tree[parent_rows]
        slot = child_slot.astype(np.int64)
        logger.debug("depth %d: %d walkers expanded into %d children", d, alive.shape[0], count)

    return _ChunkForest(
        node=np.concatenate(nodes_out),
        parent=np.concatenate(parent_out),
        depth=np.concatenate(depth_out),
        tree=np.concatenate(tree_out),
        slot=np.concatenate(slot_out),
    )


def traverse(
    adj: CompactAdj,
    batch: Sequence[int] | np.ndarray,
    fanouts: Sequence[int],
    accumulate: AccumulateFn | None = None,
    bias: BiasFn | None = None,
    rng: RngStream | int | None = None,
    *,
    replace: bool = True,
    workers: int = 1,
    chunk_trees: int | None = None,
) -> WalkForest:
    """Grow one tree per batch entry; ``bias=None`` means uniform over neighbours."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    fanouts = tuple(int(f) for f in fanouts)
    if batch.size == 0:
        raise ContractViolation("batch must be nonempty")
    if ((batch < 0) | (batch >= adj.n)).any():
        raise ContractViolation(f"batch holds ids outside [0, {adj.n})")
    if any(f < 1 for f in fanouts):
        raise ContractViolation("every fanout must be >= 1")
    if not isinstance(rng, RngStream):
        rng = RngStream(settings.seed if rng is None else rng)

    chunk_trees = chunk_trees or settings.traversal_chunk_trees
    bounds = [(lo, min(lo + chunk_trees, batch.size)) for lo in range(0, batch.size, chunk_trees)]
    forkable = accumulate is None or isinstance(accumulate, Accumulator)
    stateful = bool(getattr(bias, "stateful", False))
    parallel = workers > 1 and len(bounds) > 1 and forkable and not stateful
    if workers > 1 and (stateful or not forkable):
        logger.warning("Traversal runs sequentially: callbacks cannot run in parallel")

    def run_chunk(bound: tuple[int, int]) -> tuple[_ChunkForest, AccumulateFn | None]:
        lo, hi = bound
        local_acc = accumulate.fork() if isinstance(accumulate, Accumulator) else accumulate
        ids = np.arange(lo, hi, dtype=np.int64)
        part = _traverse_chunk(adj, batch[lo:hi], ids, fanouts, local_acc, bias, rng, replace)
        return part, local_acc

    if parallel:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, bounds))
    else:
        results = []
        for bound in bounds:
            part, local_acc = run_chunk(bound)
            if isinstance(accumulate, Accumulator):
                accumulate.merge(local_acc)
                local_acc = None
            results.append((part, local_acc))

    if parallel and isinstance(accumulate, Accumulator):
        for _, local_acc in results:
            accumulate.merge(local_acc)

    offset = 0
    parents = []
    for part, _ in results:
        parents.append(np.where(part.parent >= 0, part.parent + offset, -1))
        offset += part.node.shape[0]

    forest = WalkForest(
        batch=batch,
        fanouts=fanouts,
        node=np.concatenate([p.node for p, _ in results]),
        parent=np.concatenate(parents),
        depth=np.concatenate([p.depth for p, _ in results]),
        tree=np.concatenate([p.tree for p, _ in results]),
        slot=np.concatenate([p.slot for p, _ in results]),
    )
    logger.debug("Traversal: %d trees, %d forest nodes", forest.num_trees, forest.size)
    return forest
