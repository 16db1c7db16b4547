"""Edge-list loader: reads text edge files into dense-id EdgeLists."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.errors import MalformedInputError

logger = logging.getLogger(__name__)

# Field separators per format; None splits on any whitespace.
_SEPARATORS: dict[str, str | None] = {
    "tsv": "\t",
    "csv": ",",
    "space": None,
}


@dataclass
class EdgeList:
    """Edges over dense node ids ``0..n-1``.

    ``labels`` is the id-translation table (dense id -> original label) when
    the loader remapped ids; it is ``None`` when ids were already dense.
    """

    src: np.ndarray
    dst: np.ndarray
    n: int
    directed: bool = False
    weights: np.ndarray | None = None
    labels: list[str] | None = None
    self_loops_dropped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        if self.src.shape != self.dst.shape:
            raise MalformedInputError("src and dst must have the same length")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape != self.src.shape:
                raise MalformedInputError("weights must align with edges")

    @property
    def m(self) -> int:
        return int(self.src.shape[0])

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))


class EdgeListLoader:
    """Load edge files: ``src<SEP>dst[<SEP>weight]``, ``#`` comment lines skipped."""

    @staticmethod
    def load_file(
        file_path: Path,
        fmt: str | None = None,
        *,
        map_ids: bool = False,
        allow_self_loops: bool = False,
        directed: bool = False,
    ) -> EdgeList:
        fmt = fmt or EdgeListLoader._detect_format(file_path)
        if fmt not in _SEPARATORS:
            raise MalformedInputError(f"Unsupported edge-list format: {fmt}")

        sep = _SEPARATORS[fmt]
        ids: dict[str, int] = {}
        src: list[int] = []
        dst: list[int] = []
        weights: list[float] = []
        weighted: bool | None = None
        dropped = 0

        with open(file_path, encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [p.strip() for p in line.split(sep)]
                if len(parts) not in (2, 3):
                    raise MalformedInputError(
                        f"{file_path}:{lineno}: expected 2 or 3 fields, got {len(parts)}"
                    )
                if weighted is None:
                    weighted = len(parts) == 3
                elif weighted != (len(parts) == 3):
                    raise MalformedInputError(
                        f"{file_path}:{lineno}: mixed weighted and unweighted lines"
                    )

                u = EdgeListLoader._node_id(parts[0], ids, map_ids, file_path, lineno)
                v = EdgeListLoader._node_id(parts[1], ids, map_ids, file_path, lineno)
                if u == v and not allow_self_loops:
                    dropped += 1
                    continue
                src.append(u)
                dst.append(v)
                if weighted:
                    weights.append(EdgeListLoader._weight(parts[2], file_path, lineno))

        if not src and not ids:
            raise MalformedInputError(f"{file_path}: no edges found")

        if map_ids:
            labels: list[str] | None = list(ids)
            n = len(labels)
        else:
            labels = None
            # Every id seen counts, including those on dropped self-loop lines.
            n = max(ids.values()) + 1

        if dropped:
            logger.warning("%s: dropped %d self-loop line(s)", file_path, dropped)
        logger.info("Loaded %s: n=%d, %d edge line(s)", file_path, n, len(src))

        return EdgeList(
            src=np.array(src, dtype=np.int64),
            dst=np.array(dst, dtype=np.int64),
            n=n,
            directed=directed,
            weights=np.array(weights) if weighted else None,
            labels=labels,
            self_loops_dropped=dropped,
        )

    # ── Private helpers ──────────────────────────────────────────────

    @staticmethod
    def _detect_format(file_path: Path) -> str:
        suffix = Path(file_path).suffix.lower()
        if suffix == ".csv":
            return "csv"
        if suffix == ".tsv":
            return "tsv"
        return "space"

    @staticmethod
    def _node_id(
        token: str, ids: dict[str, int], map_ids: bool, file_path: Path, lineno: int
    ) -> int:
        if map_ids:
            return ids.setdefault(token, len(ids))
        try:
            value = int(token)
        except ValueError:
            raise MalformedInputError(
                f"{file_path}:{lineno}: non-integer node id {token!r} (use --map-ids)"
            ) from None
        if value < 0:
            raise MalformedInputError(f"{file_path}:{lineno}: negative node id {value}")
        ids.setdefault(token, value)
        return value

    @staticmethod
    def _weight(token: str, file_path: Path, lineno: int) -> float:
        try:
            value = float(token)
        except ValueError:
            raise MalformedInputError(f"{file_path}:{lineno}: bad weight {token!r}") from None
        if not math.isfinite(value) or value <= 0:
            raise MalformedInputError(f"{file_path}:{lineno}: weight must be positive")
        return value


def load_edge_list(
    path: Path | str,
    fmt: str | None = None,
    *,
    map_ids: bool = False,
    allow_self_loops: bool = False,
    directed: bool = False,
) -> EdgeList:
    """Read an edge file; with ``map_ids`` labels are remapped densely in first-seen order."""
    return EdgeListLoader.load_file(
        Path(path), fmt, map_ids=map_ids, allow_self_loops=allow_self_loops, directed=directed
    )


def write_edge_list(edges: EdgeList, path: Path | str) -> Path:
    """Write ``src<TAB>dst[<TAB>weight]`` lines, one edge per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# n={edges.n} m={edges.m} directed={str(edges.directed).lower()}\n")
        if edges.weights is None:
            for u, v in zip(edges.src.tolist(), edges.dst.tolist()):
                handle.write(f"{u}\t{v}\n")
        else:
            for u, v, w in zip(edges.src.tolist(), edges.dst.tolist(), edges.weights.tolist()):
                handle.write(f"{u}\t{v}\t{w!r}\n")
    return path


def write_id_map(labels: list[str], path: Path | str) -> Path:
    """Persist the id-translation table as ``dense_id<TAB>label`` lines."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for dense_id, label in enumerate(labels):
            handle.write(f"{dense_id}\t{label}\n")
    return path
