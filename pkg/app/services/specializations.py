"""Accumulate and bias callbacks specializing the traversal to concrete models.

- RootedAdjacency / NoRevisitBias / renormalize: sampled message-passing
  adjacencies.
- DeepWalkAccumulator: skip-gram loss with per-walker η correction
  (node2vec reuses it in weight mode).
- N2vBias: second-order return / in-out bias.
- WysAccumulator: context-weighted objective with trainable coefficients Q.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp

from app.errors import ContractViolation
from app.graph.compact_adj import CompactAdj
from app.services.traversal import (
    Accumulator,
    Bias,
    RngStream,
    TraversalStep,
    gather_candidates,
    traverse,
)

logger = logging.getLogger(__name__)


# ── Rooted adjacency ─────────────────────────────────────────────────


class RootedAdjacency(Accumulator):
    """Reversed traversal edges Ã[child, parent] = 1, plus bookkeeping.

    Besides the edge set it records forward child multiplicities per
    expanded node, the number of expansions of each node, the reached-node
    set and the ``expanded`` mask written by NoRevisitBias.
    """

    def __init__(self, n: int):
        self.n = n
        self.expanded = np.zeros(n, dtype=bool)
        self.expansions = np.zeros(n, dtype=np.int64)
        self._reversed: list[np.ndarray] = []
        self._forward: list[np.ndarray] = []
        self._reached: list[np.ndarray] = []

    # Accumulator protocol

    def __call__(self, step: TraversalStep) -> None:
        parents = step.paths[:, -1]
        self.add_steps(parents, step.nodes)
        self._reached.append(step.paths[:, 0])
        _, first = np.unique(step.path_index[:, -1], return_index=True)
        self.expansions += np.bincount(parents[first], minlength=self.n)

    def fork(self) -> RootedAdjacency:
        return RootedAdjacency(self.n)

    def merge(self, other: RootedAdjacency) -> None:
        self._reversed.extend(other._reversed)
        self._forward.extend(other._forward)
        self._reached.extend(other._reached)
        self.expansions += other.expansions

    # Building blocks

    def add_steps(self, parents: np.ndarray, children: np.ndarray) -> None:
        parents = np.asarray(parents, dtype=np.int64)
        children = np.asarray(children, dtype=np.int64)
        self._reversed.append(children * self.n + parents)
        self._forward.append(parents * self.n + children)
        self._reached.append(np.concatenate([parents, children]))

    def add_roots(self, batch: Sequence[int] | np.ndarray) -> None:
        self._reached.append(np.asarray(batch, dtype=np.int64).reshape(-1))

    @classmethod
    def from_edges(cls, n: int, children: np.ndarray, parents: np.ndarray) -> RootedAdjacency:
        """State holding exactly the given reversed edges (every endpoint reached)."""
        state = cls(n)
        state.add_steps(parents, children)
        return state

    # Views

    def _keys(self, parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct stored (child, parent) pairs."""
        keys = np.unique(self._keys(self._reversed))
        return keys // self.n, keys % self.n

    @property
    def reached(self) -> np.ndarray:
        return np.unique(self._keys(self._reached))

    def forward_counts(self) -> sp.csr_matrix:
        """(n x n) multiplicity of parent -> child draws."""
        keys = self._keys(self._forward)
        data = np.ones(keys.shape[0])
        return sp.csr_matrix(
            sp.coo_matrix((data, (keys // self.n, keys % self.n)), shape=(self.n, self.n))
        )

    def matrix(self) -> sp.csr_matrix:
        """Binary Ã (n x n)."""
        child, parent = self.edges
        data = np.ones(child.shape[0])
        return sp.csr_matrix((data, (child, parent)), shape=(self.n, self.n))


def rooted_adj_accumulate(state: RootedAdjacency, path: Sequence[int], u: int, f: int | None = None) -> RootedAdjacency:
    """Ã[u, T₋1] ← 1 for one traversal step."""
    if len(path) == 0:
        raise ContractViolation("rooted accumulation needs a parent (empty path)")
    state.add_steps(np.array([path[-1]]), np.array([u]))
    return state


def no_revisit_bias(state: RootedAdjacency, path: Sequence[int], u: int, adj: CompactAdj) -> np.ndarray:
    """Uniform 1/δ_u over neighbours of an unexpanded node, zeros otherwise.

    Granting the mass marks ``u`` expanded, so a second visit gets zeros.
    """
    degree = int(adj.degrees[u])
    if state.expanded[u]:
        return np.zeros(degree)
    state.expanded[u] = True
    return np.full(degree, 1.0 / degree)


class NoRevisitBias(Bias):
    """Grants mass to the first frontier occurrence of each unexpanded node."""

    stateful = True

    def __init__(self, state: RootedAdjacency):
        self.state = state

    def __call__(self, walks: np.ndarray, adj: CompactAdj) -> np.ndarray:
        current = walks[:, -1]
        grant = np.zeros(current.shape[0], dtype=bool)
        _, first = np.unique(current, return_index=True)
        grant[first] = True
        grant &= ~self.state.expanded[current]
        self.state.expanded[current[grant]] = True
        degrees = adj.degrees[current]
        return np.repeat(np.where(grant, 1.0 / degrees, 0.0), degrees)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Å over the reached nodes; row/column i is graph node ``nodes[i]``."""

    nodes: np.ndarray
    matrix: sp.csr_matrix
    full_degrees: np.ndarray
    sampled_degrees: np.ndarray
    form: str

    def to_full(self, n: int) -> sp.csr_matrix:
        """Embed into an (n x n) matrix; unreached rows and columns are zero."""
        coo = self.matrix.tocoo()
        return sp.csr_matrix(
            (coo.data, (self.nodes[coo.row], self.nodes[coo.col])), shape=(n, n)
        )

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def renormalize(
    state: RootedAdjacency,
    full_degrees: np.ndarray,
    self_loops: Literal["forced", "sampled"] = "forced",
) -> NormalizedAdjacency:
    """Å = D′^{1/2} · D̃′⁻¹ · Ã′ · D′^{-1/2} over reached nodes.

    ``forced``: Ã′ = I + Ã, δ̃′ its row sums.
    ``sampled``: Ã′ holds the forward draw counts of a traversal over the
    self-loop-augmented graph and δ̃′ the number of draws per row; rows of
    nodes never expanded stay empty.
    """
    reached = state.reached
    if reached.size == 0:
        raise ContractViolation("renormalize needs at least one reached node")
    full_degrees = np.asarray(full_degrees, dtype=np.float64)
    if full_degrees.shape[0] != state.n:
        raise ContractViolation("full_degrees must cover every graph node")

    if self_loops == "forced":
        tilde = state.matrix()[reached][:, reached]
        tilde = (tilde + sp.identity(reached.size, format="csr")).tocsr()
        tilde.data[:] = 1.0
    elif self_loops == "sampled":
        tilde = state.forward_counts()[reached][:, reached].tocsr()
    else:
        raise ContractViolation(f"unknown self-loop mode: {self_loops}")

    sampled_degrees = np.asarray(tilde.sum(axis=1)).ravel()
    d_full = full_degrees[reached]
    row_scale = np.sqrt(d_full) / np.where(sampled_degrees > 0, sampled_degrees, 1.0)
    col_scale = 1.0 / np.sqrt(d_full)
    normalized = sp.diags(row_scale) @ tilde @ sp.diags(col_scale)
    return NormalizedAdjacency(
        nodes=reached,
        matrix=sp.csr_matrix(normalized),
        full_degrees=d_full,
        sampled_degrees=sampled_degrees,
        form=self_loops,
    )


def sample_rooted_adjacency(
    adj: CompactAdj,
    batch: Sequence[int] | np.ndarray,
    fanouts: Sequence[int],
    rng: RngStream | int | None = None,
    *,
    no_revisit: bool = True,
    workers: int = 1,
) -> RootedAdjacency:
    """One traversal accumulating a rooted adjacency (NoRevisitBias by default)."""
    state = RootedAdjacency(adj.n)
    state.add_roots(batch)
    bias = NoRevisitBias(state) if no_revisit else None
    traverse(adj, batch, fanouts, accumulate=state, bias=bias, rng=rng, workers=workers)
    return state


# ── Node2vec ─────────────────────────────────────────────────────────


def _check_pq(p: float, q: float) -> None:
    if p <= 0 or q <= 0:
        raise ContractViolation(f"node2vec needs p > 0 and q > 0 (got p={p}, q={q})")


def _mutual(adj: CompactAdj, prev: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Whether rows ``prev[i]`` and ``cand[i]`` share at least one stored entry."""
    lengths = adj.degrees[cand]
    starts = np.zeros(cand.shape[0], dtype=np.int64)
    np.cumsum(lengths[:-1], out=starts[1:])
    hits = adj.has_edges(np.repeat(prev, lengths), gather_candidates(adj, cand))
    return np.add.reduceat(hits.astype(np.int64), starts) > 0


class N2vBias(Bias):
    """Weight p^{-1[i = T₋2]} · q^{-1[rows of T₋2 and i intersect]}; uniform on the first step."""

    def __init__(self, p: float, q: float):
        _check_pq(p, q)
        self.p = float(p)
        self.q = float(q)

    def __call__(self, walks: np.ndarray, adj: CompactAdj) -> np.ndarray:
        current = walks[:, -1]
        candidates = gather_candidates(adj, current)
        if walks.shape[1] < 2:
            return np.ones(candidates.shape[0])
        prev = np.repeat(walks[:, -2], adj.degrees[current])
        return self.pair_weights(adj, prev, candidates)

    def pair_weights(self, adj: CompactAdj, prev: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        weights = np.where(candidates == prev, 1.0 / self.p, 1.0)
        if candidates.size:
            weights *= np.where(_mutual(adj, prev, candidates), 1.0 / self.q, 1.0)
        return weights


def n2v_bias(path: Sequence[int], u: int, p: float, q: float, adj: CompactAdj) -> np.ndarray:
    """Unnormalized node2vec mass over ``neighbors(u)`` after walking ``path``."""
    walk = np.asarray(list(path) + [u], dtype=np.int64)[None, :]
    return N2vBias(p, q)(walk, adj)


# ── DeepWalk ─────────────────────────────────────────────────────────


class _EtaTable:
    """η per forest node (chunk-local index); roots default to 1."""

    def __init__(self) -> None:
        self.values = np.ones(0)

    def get(self, index: np.ndarray) -> np.ndarray:
        out = np.ones(index.shape)
        known = index < self.values.shape[0]
        out[known] = self.values[index[known]]
        return out

    def set(self, index: np.ndarray, values: np.ndarray) -> None:
        top = int(index.max()) + 1
        if top > self.values.shape[0]:
            self.values = np.concatenate([self.values, np.ones(top - self.values.shape[0])])
        self.values[index] = values


class GradientBuffer:
    """Dense gradient of one table plus the mask of touched rows."""

    def __init__(self, shape: tuple[int, int]):
        self.grad = np.zeros(shape)
        self.touched = np.zeros(shape[0], dtype=bool)

    def add(self, rows: np.ndarray, values: np.ndarray) -> None:
        np.add.at(self.grad, rows, values)
        self.touched[rows] = True

    def merge(self, other: GradientBuffer) -> None:
        self.grad += other.grad
        self.touched |= other.touched


def degree_negative_distribution(adj: CompactAdj) -> np.ndarray:
    """P_n(v) ∝ δ_v^{3/4}."""
    weights = adj.degrees.astype(np.float64) ** 0.75
    return weights / weights.sum()


class DeepWalkAccumulator(Accumulator):
    """Windowed skip-gram loss over walk forests.

    Each child u subtracts ⟨Z_u, Σ_{k ≤ min(C, |T|)} η[T₋k]·(C-k+1)/C·Z_{T₋k}⟩
    and stores η[u] = η[T₋1]/f. ``begin`` adds the contrastive term for the
    batch. With ``reweight`` the η of a child also carries the ratio of the
    node2vec transition probability to the uniform one (weight mode).
    """

    def __init__(self, Z: np.ndarray, window: int, reweight: N2vBias | None = None, adj: CompactAdj | None = None):
        if window < 1:
            raise ContractViolation("window must be >= 1")
        if reweight is not None and adj is None:
            raise ContractViolation("node2vec weight mode needs the adjacency")
        self.Z = Z
        self.window = window
        self.reweight = reweight
        self.adj = adj
        self.loss = 0.0
        self.buffer = GradientBuffer(Z.shape)
        self._eta = _EtaTable()

    def fork(self) -> DeepWalkAccumulator:
        return DeepWalkAccumulator(self.Z, self.window, self.reweight, self.adj)

    def merge(self, other: DeepWalkAccumulator) -> None:
        self.loss += other.loss
        self.buffer.merge(other.buffer)

    def begin(self, batch: np.ndarray, negatives: np.ndarray) -> None:
        """Contrastive term Σ_{u∈B} log mean_j exp⟨Z_u, Z_{v_j}⟩ over shared negatives."""
        batch = np.asarray(batch, dtype=np.int64)
        negatives = np.asarray(negatives, dtype=np.int64)
        if negatives.size == 0:
            return
        Zb, Zn = self.Z[batch], self.Z[negatives]
        scores = Zb @ Zn.T
        self.loss += float(np.sum(logsumexp(scores, axis=1) - np.log(negatives.size)))
        soft = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
        self.buffer.add(batch, soft @ Zn)
        self.buffer.add(negatives, soft.T @ Zb)

    def _transition_ratio(self, step: TraversalStep) -> np.ndarray:
        walks = step.paths
        current = walks[:, -1]
        if walks.shape[1] < 2:
            return np.ones(len(step))
        seg_weights = self.reweight(walks, self.adj)
        degrees = self.adj.degrees[current]
        starts = np.zeros(current.shape[0], dtype=np.int64)
        np.cumsum(degrees[:-1], out=starts[1:])
        totals = np.add.reduceat(seg_weights, starts)
        chosen = self.reweight.pair_weights(self.adj, walks[:, -2], step.nodes)
        return chosen / totals * degrees

    def __call__(self, step: TraversalStep) -> None:
        paths, index, u = step.paths, step.path_index, step.nodes
        eta_child = self._eta.get(index[:, -1]) / step.fanout
        if self.reweight is not None:
            eta_child = eta_child * self._transition_ratio(step)
        self._eta.set(step.node_index, eta_child)

        Zu = self.Z[u]
        context = np.zeros_like(Zu)
        C = self.window
        for k in range(1, min(C, paths.shape[1]) + 1):
            coef = self._eta.get(index[:, -k]) * (C - k + 1) / C
            Zc = self.Z[paths[:, -k]]
            context += coef[:, None] * Zc
            self.buffer.add(paths[:, -k], -coef[:, None] * Zu)
        self.loss -= float(np.einsum("ij,ij->", Zu, context))
        self.buffer.add(u, -context)


def deepwalk_accumulate(
    state: DeepWalkAccumulator,
    path: Sequence[int],
    u: int,
    f: int,
    path_eta: Sequence[float] | None = None,
) -> DeepWalkAccumulator:
    """Single-step form of the DeepWalk accumulation (η of the path defaults to 1)."""
    if len(path) == 0:
        raise ContractViolation("deepwalk accumulation needs a parent (empty path)")
    depth = len(path)
    index = np.arange(depth, dtype=np.int64)[None, :]
    if path_eta is not None:
        state._eta.set(index[0], np.asarray(path_eta, dtype=np.float64))
    state(
        TraversalStep(
            paths=np.asarray(path, dtype=np.int64)[None, :],
            path_index=index,
            nodes=np.array([u], dtype=np.int64),
            node_index=np.array([depth], dtype=np.int64),
            fanout=f,
            depth=depth,
            tree=np.zeros(1, dtype=np.int64),
        )
    )
    return state


# ── WYS ──────────────────────────────────────────────────────────────


class WysAccumulator(Accumulator):
    """Context-weighted objective over walks of exactly |Q| steps.

    For t = T[0] and U = T[1:] + [u]:
    loss -= log σ(⟨R_t, Σ_j Q_j L_{U_j}⟩ + ⟨L_t, Σ_j Q_j R_{U_j}⟩).
    """

    def __init__(self, L: np.ndarray, R: np.ndarray, Q: np.ndarray):
        if L.shape != R.shape:
            raise ContractViolation("L and R must have the same shape")
        self.L, self.R = L, R
        self.Q = np.asarray(Q, dtype=np.float64)
        self.loss = 0.0
        self.grad_L = GradientBuffer(L.shape)
        self.grad_R = GradientBuffer(R.shape)
        self.grad_Q = np.zeros_like(self.Q)
        self.fired = 0

    def fork(self) -> WysAccumulator:
        return WysAccumulator(self.L, self.R, self.Q)

    def merge(self, other: WysAccumulator) -> None:
        self.loss += other.loss
        self.grad_L.merge(other.grad_L)
        self.grad_R.merge(other.grad_R)
        self.grad_Q += other.grad_Q
        self.fired += other.fired

    def begin(self, batch: np.ndarray, negatives: np.ndarray) -> None:
        """Negative part -Σ_u log σ(-mean_v(⟨R_u, L_v⟩ + ⟨R_v, L_u⟩)) with uniform v."""
        batch = np.asarray(batch, dtype=np.int64)
        negatives = np.asarray(negatives, dtype=np.int64)
        if negatives.size == 0:
            return
        N = negatives.size
        Lb, Rb = self.L[batch], self.R[batch]
        Ln, Rn = self.L[negatives], self.R[negatives]
        mean_Ln, mean_Rn = Ln.mean(axis=0), Rn.mean(axis=0)
        m = Rb @ mean_Ln + Lb @ mean_Rn
        self.loss += float(np.sum(np.logaddexp(0.0, m)))
        g = expit(m)
        self.grad_R.add(batch, g[:, None] * mean_Ln)
        self.grad_L.add(batch, g[:, None] * mean_Rn)
        gsum_R = (g[:, None] * Rb).sum(axis=0) / N
        gsum_L = (g[:, None] * Lb).sum(axis=0) / N
        self.grad_L.add(negatives, np.broadcast_to(gsum_R, Ln.shape))
        self.grad_R.add(negatives, np.broadcast_to(gsum_L, Rn.shape))

    def __call__(self, step: TraversalStep) -> None:
        if step.paths.shape[1] != self.Q.shape[0]:
            return
        t = step.paths[:, 0]
        U = np.hstack([step.paths[:, 1:], step.nodes[:, None]])
        LU, RU = self.L[U], self.R[U]  # (N, |Q|, h)
        ctx_L = np.einsum("j,njh->nh", self.Q, LU)
        ctx_R = np.einsum("j,njh->nh", self.Q, RU)
        Lt, Rt = self.L[t], self.R[t]
        s = np.einsum("nh,nh->n", Rt, ctx_L) + np.einsum("nh,nh->n", Lt, ctx_R)
        self.loss += float(np.sum(np.logaddexp(0.0, -s)))
        self.fired += int(t.shape[0])

        g = -expit(-s)
        self.grad_R.add(t, g[:, None] * ctx_L)
        self.grad_L.add(t, g[:, None] * ctx_R)
        for j in range(self.Q.shape[0]):
            self.grad_L.add(U[:, j], (g * self.Q[j])[:, None] * Rt)
            self.grad_R.add(U[:, j], (g * self.Q[j])[:, None] * Lt)
        per_pos = np.einsum("nh,njh->nj", Rt, LU) + np.einsum("nh,njh->nj", Lt, RU)
        self.grad_Q += g @ per_pos


def wys_accumulate(state: WysAccumulator, path: Sequence[int], u: int) -> WysAccumulator:
    """Single-step form; a no-op unless |path| = |Q|."""
    depth = len(path)
    if depth == 0:
        raise ContractViolation("wys accumulation needs a parent (empty path)")
    state(
        TraversalStep(
            paths=np.asarray(path, dtype=np.int64)[None, :],
            path_index=np.arange(depth, dtype=np.int64)[None, :],
            nodes=np.array([u], dtype=np.int64),
            node_index=np.array([depth], dtype=np.int64),
            fanout=1,
            depth=depth,
            tree=np.zeros(1, dtype=np.int64),
        )
    )
    return state
