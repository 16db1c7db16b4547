"""Embedding tables, the GTTF training loop and the linear GCN layer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.config import settings
from app.errors import ContractViolation, TrainingDivergedError
from app.graph.compact_adj import CompactAdj
from app.services.specializations import (
    DeepWalkAccumulator,
    N2vBias,
    RootedAdjacency,
    WysAccumulator,
    degree_negative_distribution,
    renormalize,
)
from app.services.traversal import RngStream, traverse

logger = logging.getLogger(__name__)

Method = Literal["deepwalk", "node2vec", "wys"]
METHODS: tuple[str, ...] = ("deepwalk", "node2vec", "wys")


# ── Models ───────────────────────────────────────────────────────────


@dataclass
class EmbeddingModel:
    """Z (n x d) for deepwalk / node2vec, or L and R (n x d/2) for WYS."""

    method: str
    dim: int
    Z: np.ndarray | None = None
    L: np.ndarray | None = None
    R: np.ndarray | None = None
    Q: np.ndarray | None = None

    @classmethod
    def initialize(
        cls, n: int, dim: int, method: Method, rng: np.random.Generator, q_init: Sequence[float] | None = None,
        window: int | None = None,
    ) -> EmbeddingModel:
        """Uniform entries in [-0.5/d, 0.5/d]."""
        if dim < 1:
            raise ContractViolation("embedding dim must be positive")
        scale = 0.5 / dim
        if method == "wys":
            if dim % 2:
                raise ContractViolation(f"WYS needs an even dim (got {dim})")
            half = dim // 2
            window = window or settings.window
            Q = np.asarray(q_init, dtype=np.float64) if q_init is not None else np.full(window, 1.0 / window)
            return cls(
                method=method,
                dim=dim,
                L=rng.uniform(-scale, scale, size=(n, half)),
                R=rng.uniform(-scale, scale, size=(n, half)),
                Q=Q,
            )
        if method not in METHODS:
            raise ContractViolation(f"unknown method: {method}")
        return cls(method=method, dim=dim, Z=rng.uniform(-scale, scale, size=(n, dim)))

    @property
    def n(self) -> int:
        return int((self.Z if self.Z is not None else self.L).shape[0])

    def embeddings(self) -> np.ndarray:
        """Z, or L‖R for WYS."""
        if self.Z is not None:
            return self.Z
        return np.hstack([self.L, self.R])

    def tables(self) -> dict[str, np.ndarray]:
        if self.Z is not None:
            return {"Z": self.Z}
        return {"L": self.L, "R": self.R}


def write_embeddings(path: Path | str, matrix: np.ndarray, labels: Sequence[str] | None = None) -> Path:
    """First line ``n d``, then ``id v1 ... vd`` per node."""
    path = Path(path)
    n, d = matrix.shape
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{n} {d}\n")
        for i in range(n):
            name = labels[i] if labels is not None else str(i)
            handle.write(name + " " + " ".join(f"{x:.17g}" for x in matrix[i]) + "\n")
    return path


def read_embeddings(path: Path | str) -> np.ndarray:
    """Inverse of ``write_embeddings`` for dense ids."""
    with open(path, encoding="utf-8") as handle:
        n, d = (int(x) for x in handle.readline().split())
        matrix = np.zeros((n, d))
        for line in handle:
            parts = line.split()
            if not parts:
                continue
            matrix[int(parts[0])] = [float(x) for x in parts[1:]]
    return matrix


class TrainConfig(BaseModel):
    """Training hyper-parameters; defaults follow the general recipe in settings."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = 64
    fanouts: list[int] | None = None
    window: int = settings.window
    dim: int = settings.dim
    negatives: int = settings.negatives
    contrastive_samples: int = settings.contrastive_samples
    learning_rate: float = settings.learning_rate
    lr_decay: float = settings.lr_decay
    lr_decay_every: int = settings.lr_decay_every
    epochs: int = settings.epochs
    seed: int = settings.seed
    p: float = 1.0
    q: float = 1.0
    node2vec_mode: Literal["bias", "weight"] = "bias"
    q_init: list[float] | None = None
    train_q: bool = True
    replace: bool = True  # False: each node draws min(f, δ) distinct neighbours
    log_every: int = settings.log_every

    @field_validator("batch_size", "window", "dim", "epochs", "lr_decay_every", "log_every")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("learning_rate", "negatives", "contrastive_samples")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @field_validator("lr_decay")
    @classmethod
    def _decay(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("decay factor must be in (0, 1]")
        return value

    @model_validator(mode="after")
    def _fanouts(self) -> TrainConfig:
        if self.fanouts is not None and (not self.fanouts or min(self.fanouts) < 1):
            raise ValueError("fanouts must be a nonempty list of positive integers")
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        return self

    def resolved_fanouts(self, fanout: int | None = None) -> list[int]:
        """Explicit fanouts, else ``[fanout] * window``."""
        if self.fanouts is not None:
            return list(self.fanouts)
        return [fanout or settings.fanout] * self.window

    def rate(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainResult:
    model: EmbeddingModel
    losses: list[float] = field(default_factory=list)
    q_trace: list[list[float]] = field(default_factory=list)


# ── Optimization ─────────────────────────────────────────────────────


def sgd_step(
    table: np.ndarray, gradient: np.ndarray, rate: float, touched: np.ndarray | None = None
) -> np.ndarray:
    """Z ← Z - ε∇ on touched rows only (rows with any nonzero gradient by default)."""
    if table.shape != gradient.shape:
        raise ContractViolation(f"gradient shape {gradient.shape} != table shape {table.shape}")
    if touched is None:
        touched = np.any(gradient != 0, axis=1)
    rows = np.flatnonzero(touched)
    if not np.isfinite(gradient[rows]).all():
        raise TrainingDivergedError("non-finite gradient; lower the learning rate")
    if rate != 0.0:
        table[rows] -= rate * gradient[rows]
    return table


def _check_finite(loss: float, round_index: int, rate: float) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"loss became {loss} at round {round_index} (learning rate {rate}); lower the learning rate"
        )


def train_embeddings(
    adj: CompactAdj,
    model: EmbeddingModel,
    method: Method,
    config: TrainConfig,
    rng: RngStream | int | None = None,
    *,
    workers: int = 1,
    chunk_trees: int | None = None,
    on_round: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Per round: fresh accumulator, batch, traversal, SGD step.

    An epoch covers every node once in batches of ``batch_size``; the
    learning rate decays per epoch. Loss and gradients are averaged over
    the batch seeds.
    """
    if method != model.method and not (method == "node2vec" and model.method == "deepwalk"):
        raise ContractViolation(f"model built for {model.method}, asked to train {method}")
    rng = rng if isinstance(rng, RngStream) else RngStream(config.seed if rng is None else rng)
    n = adj.n
    fanouts = config.resolved_fanouts()
    if method == "wys" and len(fanouts) != model.Q.shape[0]:
        raise ContractViolation(f"WYS needs walk depth {len(fanouts)} to equal |Q| = {model.Q.shape[0]}")
    neg_dist = degree_negative_distribution(adj)
    n2v = N2vBias(config.p, config.q) if method == "node2vec" else None
    bias = n2v if n2v is not None and config.node2vec_mode == "bias" else None
    result = TrainResult(model=model)
    per_epoch = math.ceil(n / config.batch_size)

    round_index = 0
    for epoch in range(config.epochs):
        rate = config.rate(epoch)
        order = rng.generator(1, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            gen = rng.generator(2, round_index)
            if method == "wys":
                negatives = gen.integers(0, n, size=config.negatives)
                acc = WysAccumulator(model.L, model.R, model.Q)
            else:
                negatives = gen.choice(n, size=config.contrastive_samples, p=neg_dist)
                reweight = n2v if n2v is not None and config.node2vec_mode == "weight" else None
                acc = DeepWalkAccumulator(model.Z, config.window, reweight=reweight, adj=adj)
            acc.begin(batch, negatives)
            traverse(
                adj, batch, fanouts, accumulate=acc, bias=bias,
                rng=rng.substream(3, round_index), replace=config.replace,
                workers=workers, chunk_trees=chunk_trees,
            )

            scale = 1.0 / batch.shape[0]
            loss = acc.loss * scale
            _check_finite(loss, round_index, rate)
            if method == "wys":
                sgd_step(model.L, acc.grad_L.grad * scale, rate, acc.grad_L.touched)
                sgd_step(model.R, acc.grad_R.grad * scale, rate, acc.grad_R.touched)
                if config.train_q:
                    grad_q = acc.grad_Q * scale
                    if not np.isfinite(grad_q).all():
                        raise TrainingDivergedError("non-finite gradient for Q; lower the learning rate")
                    model.Q -= rate * grad_q
                result.q_trace.append(model.Q.tolist())
            else:
                sgd_step(model.Z, acc.buffer.grad * scale, rate, acc.buffer.touched)

            result.losses.append(loss)
            if on_round is not None:
                on_round(round_index, loss)
            if round_index % config.log_every == 0:
                logger.info(
                    "Round %d (epoch %d/%d, %d per epoch): loss=%.6g lr=%.4g",
                    round_index, epoch + 1, config.epochs, per_epoch, loss, rate,
                )
            round_index += 1

    logger.info("Training finished: %d rounds, final loss %.6g", round_index, result.losses[-1])
    return result


def write_loss_trace(path: Path | str, losses: Sequence[float]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("round,loss\n")
        for i, loss in enumerate(losses):
            handle.write(f"{i},{loss:.17g}\n")
    return path


def write_q_trace(path: Path | str, trace: Sequence[Sequence[float]]) -> Path:
    path = Path(path)
    width = len(trace[0]) if trace else 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(["round"] + [f"q{j}" for j in range(width)]) + "\n")
        for i, row in enumerate(trace):
            handle.write(",".join([str(i)] + [f"{x:.17g}" for x in row]) + "\n")
    return path


# ── Factorization view ───────────────────────────────────────────────


def _as_dense(matrix) -> np.ndarray:
    return matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)


def factorization_gradient(
    L: np.ndarray,
    R: np.ndarray,
    coefficients: Sequence[float],
    powers: Sequence[np.ndarray | sp.spmatrix],
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ½‖LR - Σ_k c_k P_k‖²_F: ((LR - M)Rᵀ, Lᵀ(LR - M))."""
    if len(coefficients) != len(powers):
        raise ContractViolation("one coefficient per transition power is required")
    L = np.asarray(L, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if L.shape[1] != R.shape[0]:
        raise ContractViolation(f"L {L.shape} and R {R.shape} do not compose")
    target = np.zeros((L.shape[0], R.shape[1]))
    for c, power in zip(coefficients, powers):
        power = _as_dense(power)
        if power.shape != target.shape:
            raise ContractViolation(f"power shape {power.shape} != LR shape {target.shape}")
        target += c * power
    residual = L @ R - target
    return residual @ R.T, L.T @ residual


# ── Linear GCN ───────────────────────────────────────────────────────


@dataclass
class LinearGcnModel:
    """H = Å X W with Å in ``normalization`` form.

    ``symmetric`` normalizes a dense adjacency as D′^{-1/2} A′ D′^{-1/2} with
    A′ = max(A, Aᵀ) + I;
    ``renormalized`` rescales a sampled RootedAdjacency against the full degrees.
    """

    W: np.ndarray
    normalization: Literal["renormalized", "symmetric"] = "symmetric"
    self_loops: Literal["forced", "sampled"] = "forced"

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        if not np.isfinite(self.W).all():
            raise ContractViolation("W must be finite")
        if self.normalization not in ("renormalized", "symmetric"):
            raise ContractViolation(f"unknown normalization: {self.normalization}")

    def normalize(self, adjacency, full_degrees: np.ndarray | None = None) -> np.ndarray:
        """Å (n x n, dense) for this model's normalization."""
        if self.normalization == "symmetric":
            if isinstance(adjacency, RootedAdjacency):
                adjacency = adjacency.matrix().toarray()
            A = _as_dense(adjacency)
            return symmetric_normalized(np.maximum(A, A.T))
        if not isinstance(adjacency, RootedAdjacency):
            raise ContractViolation("renormalized mode needs a sampled RootedAdjacency")
        if full_degrees is None:
            raise ContractViolation("renormalized mode needs the full-graph degrees")
        normalized = renormalize(adjacency, full_degrees, self_loops=self.self_loops)
        return normalized.to_full(adjacency.n).toarray()

    def forward(self, adjacency, X: np.ndarray, full_degrees: np.ndarray | None = None) -> np.ndarray:
        return linear_gcn_forward(self, self.normalize(adjacency, full_degrees), X)


def propagate(A_norm, X: np.ndarray) -> np.ndarray:
    """Å X, the layer input before the weights."""
    X = np.asarray(X, dtype=np.float64)
    if A_norm.shape[1] != X.shape[0]:
        raise ContractViolation(f"Å {A_norm.shape} does not compose with X {X.shape}")
    return np.asarray(A_norm @ X)


def linear_gcn_forward(model: LinearGcnModel, A_norm, X: np.ndarray) -> np.ndarray:
    AX = propagate(A_norm, X)
    if AX.shape[1] != model.W.shape[0]:
        raise ContractViolation(f"X {np.shape(X)} does not compose with W {model.W.shape}")
    return AX @ model.W


def symmetric_normalized(dense_adjacency: np.ndarray) -> np.ndarray:
    """D′^{-1/2} A′ D′^{-1/2} with A′ = A + I (diagonal forced to 1)."""
    A = np.asarray(dense_adjacency, dtype=np.float64).copy()
    np.fill_diagonal(A, 1.0)
    d = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]
