import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import ContractViolation, TrainingDivergedError
from app.graph import with_self_loops
from app.services.learning import (
    EmbeddingModel,
    LinearGcnModel,
    TrainConfig,
    factorization_gradient,
    linear_gcn_forward,
    read_embeddings,
    sgd_step,
    symmetric_normalized,
    train_embeddings,
    write_embeddings,
    write_loss_trace,
    write_q_trace,
)
from app.services.specializations import renormalize, sample_rooted_adjacency


def _model(n, dim, method="deepwalk", seed=0, **kwargs):
    return EmbeddingModel.initialize(n, dim, method, np.random.default_rng(seed), **kwargs)


# ── Config ───────────────────────────────────────────────────────────


def test_config_schedule():
    config = TrainConfig(learning_rate=0.5, lr_decay=0.2, lr_decay_every=50)

    assert config.rate(0) == 0.5
    assert config.rate(49) == 0.5
    assert config.rate(50) == pytest.approx(0.1)
    assert config.rate(120) == pytest.approx(0.02)


def test_config_fanouts():
    assert TrainConfig(window=3).resolved_fanouts() == [3, 3, 3]
    assert TrainConfig(window=3).resolved_fanouts(2) == [2, 2, 2]
    assert TrainConfig(fanouts=[4, 1]).resolved_fanouts() == [4, 1]


@pytest.mark.parametrize(
    "overrides",
    [{"batch_size": 0}, {"lr_decay": 0.0}, {"lr_decay": 1.5}, {"p": 0.0}, {"fanouts": []},
     {"fanouts": [2, 0]}, {"learning_rate": -0.1}, {"replacement": False}],
)
def test_config_rejects(overrides):
    with pytest.raises(ValidationError):
        TrainConfig(**overrides)


# ── Tables ───────────────────────────────────────────────────────────


def test_initialize_scale_and_shapes():
    model = _model(7, 8)

    assert model.Z.shape == (7, 8)
    assert np.abs(model.Z).max() <= 0.5 / 8

    wys = _model(7, 8, "wys", window=4)
    assert wys.L.shape == wys.R.shape == (7, 4)
    np.testing.assert_allclose(wys.Q, [0.25] * 4)
    assert wys.embeddings().shape == (7, 8)


def test_initialize_rejects_odd_wys_dim():
    with pytest.raises(ContractViolation, match="even"):
        _model(3, 5, "wys")


def test_sgd_step_contracts():
    table = np.arange(6, dtype=float).reshape(3, 2)

    assert np.array_equal(sgd_step(table.copy(), np.ones((3, 2)), 0.0), table)
    assert not sgd_step(table.copy(), table.copy(), 1.0).any()

    grad = np.zeros((3, 2))
    grad[1] = [1.0, 1.0]
    updated = sgd_step(table.copy(), grad, 0.5)
    assert np.array_equal(updated[[0, 2]], table[[0, 2]])
    assert updated[1].tolist() == [1.5, 2.5]

    grad[2, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        sgd_step(table.copy(), grad, 0.5)
    with pytest.raises(ContractViolation):
        sgd_step(table.copy(), np.zeros((2, 2)), 0.5)


def test_embedding_files(tmp_path):
    matrix = np.random.default_rng(4).standard_normal((3, 2))
    path = write_embeddings(tmp_path / "emb.txt", matrix)

    assert path.read_text().splitlines()[0] == "3 2"
    np.testing.assert_array_equal(read_embeddings(path), matrix)

    labelled = write_embeddings(tmp_path / "labelled.txt", matrix, ["a", "b", "c"])
    assert labelled.read_text().splitlines()[2].startswith("b ")


def test_trace_files(tmp_path):
    loss = write_loss_trace(tmp_path / "loss.csv", [1.5, 0.25])
    q = write_q_trace(tmp_path / "q.csv", [[0.5, 0.5], [0.4, 0.6]])

    assert loss.read_text().splitlines() == ["round,loss", "0,1.5", "1,0.25"]
    assert q.read_text().splitlines() == ["round,q0,q1", "0,0.5,0.5", "1,0.40000000000000002,0.59999999999999998"]


# ── Training ─────────────────────────────────────────────────────────


def test_zero_learning_rate_leaves_tables(toy_adj):
    model = _model(5, 2)
    before = model.Z.copy()
    config = TrainConfig(dim=2, window=2, fanouts=[3, 3], epochs=3, batch_size=5, learning_rate=0.0)
    result = train_embeddings(toy_adj, model, "deepwalk", config, rng=1)

    assert np.array_equal(model.Z, before)
    assert len(result.losses) == 3


def test_deepwalk_loss_trends_down(toy_adj):
    model = _model(5, 2)
    config = TrainConfig(dim=2, window=2, fanouts=[3, 3], epochs=20, batch_size=5, learning_rate=0.1)
    result = train_embeddings(toy_adj, model, "deepwalk", config, rng=2)

    assert len(result.losses) == 20
    assert np.isfinite(result.losses).all()
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])


def test_two_cliques_separate(two_cliques_adj):
    model = _model(10, 4, seed=3)
    config = TrainConfig(
        dim=4, window=2, fanouts=[3, 3], epochs=40, batch_size=10, learning_rate=0.1, contrastive_samples=5
    )
    train_embeddings(two_cliques_adj, model, "deepwalk", config, rng=3)

    gram = model.Z @ model.Z.T
    clique = np.arange(10) // 5
    same = (clique[:, None] == clique[None, :]) & ~np.eye(10, dtype=bool)
    other = clique[:, None] != clique[None, :]
    assert gram[same].mean() > gram[other].mean()


def test_training_reproducible(toy_adj):
    config = TrainConfig(dim=2, window=2, fanouts=[2, 2], epochs=4, batch_size=5, learning_rate=0.05)
    a, b = _model(5, 2), _model(5, 2)
    # two trees per chunk: every round splits into three chunks
    train_embeddings(toy_adj, a, "deepwalk", config, rng=7, chunk_trees=2)
    train_embeddings(toy_adj, b, "deepwalk", config, rng=7, workers=3, chunk_trees=2)

    assert np.array_equal(a.Z, b.Z)


def _full_walk_loss(adj, Z, fanouts, window):
    """Windowed positive term over every walk from every node, η = 1/∏F per depth."""
    total = 0.0

    def expand(path, etas):
        nonlocal total
        depth = len(path) - 1
        if depth == len(fanouts):
            return
        for v in adj.neighbors(path[-1]).tolist():
            context = np.zeros(Z.shape[1])
            for k in range(1, min(window, len(path)) + 1):
                context += etas[-k] * (window - k + 1) / window * Z[path[-k]]
            total -= float(Z[v] @ context)
            expand(path + [v], etas + [etas[-1] / fanouts[depth]])

    for root in range(adj.n):
        expand([root], [1.0])
    return total


def test_full_fanout_round_matches_full_walk_oracle(toy_adj):
    # max degree is 4: drawing 4 distinct neighbours takes every neighbour once
    fanouts = [4, 4]
    model = _model(5, 3, seed=8)
    expected = _full_walk_loss(toy_adj, model.Z.copy(), fanouts, window=2)
    config = TrainConfig(
        dim=3, window=2, fanouts=fanouts, epochs=1, batch_size=5, learning_rate=0.0,
        contrastive_samples=0, replace=False,
    )
    result = train_embeddings(toy_adj, model, "deepwalk", config, rng=2)

    assert len(result.losses) == 1
    assert result.losses[0] == pytest.approx(expected / 5, rel=1e-12, abs=1e-15)


def test_full_fanout_loss_is_seed_independent(toy_adj):
    config = dict(dim=2, window=2, fanouts=[4, 4], epochs=1, batch_size=5, learning_rate=0.0, contrastive_samples=0)
    distinct = train_embeddings(toy_adj, _model(5, 2), "deepwalk", TrainConfig(replace=False, **config), rng=1)
    again = train_embeddings(toy_adj, _model(5, 2), "deepwalk", TrainConfig(replace=False, **config), rng=9)

    # no sampling noise left: the loss does not depend on the seed
    assert distinct.losses[0] == pytest.approx(again.losses[0], rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("mode", ["bias", "weight"])
def test_node2vec_modes_train(toy_adj, mode):
    model = _model(5, 2)
    config = TrainConfig(
        dim=2, window=2, fanouts=[2, 2], epochs=5, batch_size=5, learning_rate=0.05, p=2.0, q=0.5,
        node2vec_mode=mode,
    )
    result = train_embeddings(toy_adj, model, "node2vec", config, rng=5)

    assert np.isfinite(result.losses).all()
    assert np.isfinite(model.Z).all()


def test_wys_trains_q(toy_adj):
    model = _model(5, 4, "wys", window=2)
    config = TrainConfig(dim=4, window=2, fanouts=[2, 2], epochs=5, batch_size=5, learning_rate=0.1, negatives=3)
    result = train_embeddings(toy_adj, model, "wys", config, rng=6)

    assert len(result.q_trace) == 5
    assert np.isfinite(result.losses).all()
    assert result.q_trace[-1] != [0.5, 0.5]


def test_wys_depth_must_match_q(toy_adj):
    model = _model(5, 4, "wys", window=3)
    config = TrainConfig(dim=4, window=2, fanouts=[2, 2], epochs=1, batch_size=5)

    with pytest.raises(ContractViolation, match="walk depth"):
        train_embeddings(toy_adj, model, "wys", config, rng=1)


def test_method_must_match_model(toy_adj):
    with pytest.raises(ContractViolation):
        train_embeddings(toy_adj, _model(5, 2), "wys", TrainConfig(epochs=1), rng=1)


def test_divergence_reported(toy_adj):
    model = _model(5, 2)
    model.Z[:] = 1e200
    config = TrainConfig(dim=2, window=2, fanouts=[3, 3], epochs=2, batch_size=5, learning_rate=0.1)

    with pytest.raises(TrainingDivergedError):
        train_embeddings(toy_adj, model, "deepwalk", config, rng=1)


# ── Factorization view and linear GCN ────────────────────────────────


def test_factorization_gradient_zero_tables():
    T = np.random.default_rng(0).random((4, 4))
    gL, gR = factorization_gradient(np.zeros((4, 2)), np.zeros((2, 4)), [1.0], [T])

    assert not gL.any() and not gR.any()


def test_factorization_gradient_exact_fit():
    rng = np.random.default_rng(1)
    L, R = rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
    gL, gR = factorization_gradient(L, R, [2.0], [(L @ R) / 2.0])

    np.testing.assert_allclose(gL, 0.0, atol=1e-12)
    np.testing.assert_allclose(gR, 0.0, atol=1e-12)


def test_factorization_gradient_finite_differences():
    rng = np.random.default_rng(2)
    L, R = rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
    powers = [rng.random((3, 3)), rng.random((3, 3))]
    coefficients = [0.7, 0.3]
    target = sum(c * p for c, p in zip(coefficients, powers))

    def loss(L_, R_):
        return 0.5 * np.sum((L_ @ R_ - target) ** 2)

    gL, _ = factorization_gradient(L, R, coefficients, powers)
    eps = 1e-6
    bumped = L.copy()
    bumped[1, 0] += eps
    lowered = L.copy()
    lowered[1, 0] -= eps
    assert gL[1, 0] == pytest.approx((loss(bumped, R) - loss(lowered, R)) / (2 * eps), rel=1e-6)

    with pytest.raises(ContractViolation):
        factorization_gradient(L, R, [1.0], powers)


def test_linear_gcn_forward():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 3))

    np.testing.assert_allclose(linear_gcn_forward(LinearGcnModel(np.eye(3)), np.eye(5), X), X)
    assert not linear_gcn_forward(LinearGcnModel(np.eye(3)), np.eye(5), np.zeros((5, 3))).any()

    W = rng.standard_normal((3, 2))
    A = rng.random((5, 5))
    np.testing.assert_allclose(linear_gcn_forward(LinearGcnModel(W), A, X), A @ X @ W, atol=1e-12)
    with pytest.raises(ContractViolation):
        linear_gcn_forward(LinearGcnModel(W), np.eye(4), X)


def test_symmetric_normalized(toy_adj):
    A = symmetric_normalized(toy_adj.to_dense())

    np.testing.assert_allclose(A, A.T)
    assert A[0, 0] == pytest.approx(0.5)
    assert A[1, 1] == pytest.approx(0.2)


def test_linear_gcn_symmetric_normalization(toy_adj):
    A = toy_adj.to_dense()
    upper = np.triu(A)
    model = LinearGcnModel(np.eye(3), normalization="symmetric")

    # one direction of each edge is enough: A′ = max(A, Aᵀ) + I
    np.testing.assert_allclose(model.normalize(upper), symmetric_normalized(A), atol=1e-15)
    X = np.random.default_rng(4).standard_normal((5, 3))
    np.testing.assert_allclose(model.forward(A, X), symmetric_normalized(A) @ X, atol=1e-12)


def test_linear_gcn_renormalized_mode(toy_adj):
    augmented = with_self_loops(toy_adj)
    state = sample_rooted_adjacency(augmented, np.arange(5), [2], rng=5)
    model = LinearGcnModel(np.eye(2), normalization="renormalized", self_loops="sampled")
    expected = renormalize(state, augmented.degrees, self_loops="sampled").to_full(5).toarray()

    np.testing.assert_allclose(model.normalize(state, augmented.degrees), expected)
    X = np.random.default_rng(5).standard_normal((5, 2))
    np.testing.assert_allclose(model.forward(state, X, augmented.degrees), expected @ X, atol=1e-12)
    with pytest.raises(ContractViolation):
        model.normalize(toy_adj.to_dense(), augmented.degrees)
    with pytest.raises(ContractViolation):
        model.normalize(state)
    with pytest.raises(ContractViolation):
        LinearGcnModel(np.eye(2), normalization="laplacian")
