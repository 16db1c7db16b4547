"""CompactAdj: degree vector plus left-aligned neighbour rows in one pool.

Row ``u`` lives at ``pool[offsets[u]:offsets[u + 1]]`` and holds exactly
``degrees[u]`` neighbour ids, sorted ascending.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from app.errors import MalformedInputError
from app.graph.edge_list import EdgeList

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"GTTF1"
_U64 = np.dtype("<u8")


@dataclass(frozen=True, eq=False)
class CompactAdj:
    degrees: np.ndarray
    offsets: np.ndarray
    pool: np.ndarray
    duplicates_removed: int = 0
    self_loops_added: int = 0

    def __post_init__(self) -> None:
        for arr in (self.degrees, self.offsets, self.pool):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return int(self.degrees.shape[0])

    @property
    def m(self) -> int:
        return int(self.pool.shape[0])

    @property
    def nbytes(self) -> int:
        """Bytes held by the encoding (degrees, offsets, neighbour pool)."""
        return int(self.degrees.nbytes + self.offsets.nbytes + self.pool.nbytes)

    def neighbors(self, u: int) -> np.ndarray:
        if not 0 <= u < self.n:
            raise MalformedInputError(f"node {u} outside [0, {self.n})")
        return self.pool[self.offsets[u] : self.offsets[u + 1]]

    def sources(self) -> np.ndarray:
        """Source id of every pool entry."""
        return np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        # Sorted because rows are sorted and sources ascend.
        return self.sources() * self.n + self.pool

    def has_edges(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        """Vectorized membership test of ``(src[i], dst[i])`` in the pool."""
        keys = np.asarray(src, dtype=np.int64) * self.n + np.asarray(dst, dtype=np.int64)
        pos = np.searchsorted(self.edge_keys, keys)
        pos = np.minimum(pos, self.m - 1)
        return self.edge_keys[pos] == keys

    def to_scipy(self) -> sp.csr_matrix:
        data = np.ones(self.m, dtype=np.float64)
        return sp.csr_matrix(
            (data, np.array(self.pool), np.array(self.offsets)), shape=(self.n, self.n)
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    # ── Snapshot I/O ─────────────────────────────────────────────────

    def save(self, path: Path | str) -> Path:
        """Write magic, n, m, degrees, pool, all 8-byte little-endian unsigned."""
        path = Path(path)
        with open(path, "wb") as handle:
            handle.write(SNAPSHOT_MAGIC)
            handle.write(np.array([self.n, self.m], dtype=_U64).tobytes())
            handle.write(self.degrees.astype(_U64).tobytes())
            handle.write(self.pool.astype(_U64).tobytes())
        return path

    @classmethod
    def load(cls, path: Path | str) -> CompactAdj:
        raw = Path(path).read_bytes()
        if not raw.startswith(SNAPSHOT_MAGIC):
            raise MalformedInputError(f"{path}: not a CompactAdj snapshot")
        body = raw[len(SNAPSHOT_MAGIC) :]
        if len(body) < 16 or len(body) % 8:
            raise MalformedInputError(f"{path}: truncated snapshot")
        words = np.frombuffer(body, dtype=_U64)
        n, m = int(words[0]), int(words[1])
        if words.shape[0] != 2 + n + m:
            raise MalformedInputError(f"{path}: snapshot size does not match n={n}, m={m}")
        degrees = words[2 : 2 + n].astype(np.int64)
        pool = words[2 + n :].astype(np.int64)
        if int(degrees.sum()) != m or (m and int(pool.max()) >= n):
            raise MalformedInputError(f"{path}: inconsistent degrees or neighbour ids")
        return cls(degrees=degrees, offsets=_offsets(degrees), pool=pool)


def _offsets(degrees: np.ndarray) -> np.ndarray:
    offsets = np.zeros(degrees.shape[0] + 1, dtype=np.int64)
    np.cumsum(degrees, out=offsets[1:])
    return offsets


def build_compact_adj(edges: EdgeList, symmetrize: bool = True) -> CompactAdj:
    """Build the encoding: optional symmetrization, dedup, orphan self-loops, sorted rows."""
    n = edges.n
    if n < 1:
        raise MalformedInputError("graph needs at least one node")
    src, dst = edges.src, edges.dst
    bad = (src < 0) | (src >= n) | (dst < 0) | (dst >= n)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise MalformedInputError(f"edge ({src[i]}, {dst[i]}) outside declared n={n}")

    if symmetrize:
        off_diag = src != dst
        src, dst = (
            np.concatenate([src, dst[off_diag]]),
            np.concatenate([dst, src[off_diag]]),
        )

    keys = src * n + dst
    unique_keys = np.unique(keys)
    duplicates = int(keys.shape[0] - unique_keys.shape[0])

    degrees = np.bincount(unique_keys // n, minlength=n).astype(np.int64)
    orphans = np.flatnonzero(degrees == 0)
    if orphans.size:
        unique_keys = np.union1d(unique_keys, orphans * n + orphans)
        degrees[orphans] = 1

    if duplicates:
        logger.warning("Deduplicated %d repeated edge entries", duplicates)
    if orphans.size:
        logger.info("Added self-loops to %d orphan node(s)", orphans.size)

    return CompactAdj(
        degrees=degrees,
        offsets=_offsets(degrees),
        pool=(unique_keys % n).astype(np.int64),
        duplicates_removed=duplicates,
        self_loops_added=int(orphans.size),
    )


def with_self_loops(adj: CompactAdj) -> CompactAdj:
    """The augmented graph A' = A + I (self-loops already present are kept once)."""
    n = adj.n
    diag = np.arange(n, dtype=np.int64)
    keys = np.union1d(adj.edge_keys, diag * n + diag)
    degrees = np.bincount(keys // n, minlength=n).astype(np.int64)
    return CompactAdj(degrees=degrees, offsets=_offsets(degrees), pool=(keys % n).astype(np.int64))
