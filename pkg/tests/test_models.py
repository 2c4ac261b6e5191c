import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import perturbed
from gnnedit.diffcore import finite_diff_gradient
from gnnedit.graphcore import Graph, build_normalized_adjacency, generate_sbm, split_stratified
from gnnedit.models import (KINDS, Architecture, TrainingDivergedError, accuracy, forward, init_model,
                            load_checkpoint, loss_and_grad, loss_value, predict, save_checkpoint,
                            stitch_egnn, train_base)


def fd_relative_error(model, graph, adj, nodes):
    _, g = loss_and_grad(model, graph, adj, nodes, editable_only=False)
    fd = finite_diff_gradient(lambda t: loss_value(model.with_theta(t), graph, adj, nodes),
                              model.theta, eps=1e-6)
    return np.max(np.abs(g.data - fd)) / max(1.0, np.max(np.abs(fd)))


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind, small_graph):
    adj = build_normalized_adjacency(small_graph)
    arch = Architecture(kind, small_graph.feature_dim, 2, 2, 4, 0.1)
    model = perturbed(init_model(arch, 5), 0.2)
    assert fd_relative_error(model, small_graph, adj, np.arange(small_graph.num_nodes)) < 1e-5


@settings(max_examples=10, deadline=None)
@given(kind=st.sampled_from(KINDS), layers=st.integers(1, 3), seed=st.integers(0, 1000))
def test_gradient_property(kind, layers, seed):
    g = generate_sbm(3, 4, 0.6, 0.2, 3, seed=seed)
    adj = build_normalized_adjacency(g)
    model = perturbed(init_model(Architecture(kind, 3, 3, layers, 3), seed), 0.3, seed)
    nodes = np.random.default_rng(seed).choice(g.num_nodes, 5, replace=False)
    assert fd_relative_error(model, g, adj, nodes) < 1e-5


def test_one_layer_gcn_single_node_identity():
    X = np.array([[0.5, -1.0, 2.0]])
    g = Graph(1, [], X, [0], 3)
    m = init_model(Architecture("gcn", 3, 3, num_layers=1), 0)
    m.layout.views(m.theta)["W0"][...] = np.eye(3)
    np.testing.assert_array_equal(forward(m, g, build_normalized_adjacency(g)), X)


def test_two_layer_gcn_dense_chain():
    X = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = Graph(2, [(0, 1)], X, [0, 1], 2)
    m = perturbed(init_model(Architecture("gcn", 2, 2, 2, 3), 1), 0.5)
    P = m.layout.views(m.theta)
    A = np.full((2, 2), 0.5)
    H = np.maximum(A @ X @ P["W0"] + P["b0"], 0)
    ref = A @ H @ P["W1"] + P["b1"]
    np.testing.assert_allclose(forward(m, g, build_normalized_adjacency(g)), ref, atol=1e-12)


def test_mlp_ignores_edges(small_graph):
    m = init_model(Architecture("mlp", small_graph.feature_dim, 2), 0)
    other = Graph(small_graph.num_nodes, [(0, 5), (3, 9)], small_graph.features, small_graph.labels, 2)
    a = forward(m, small_graph, build_normalized_adjacency(small_graph))
    b = forward(m, other, build_normalized_adjacency(other))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["gcn", "sage"])
def test_isolated_node_sees_only_itself(kind):
    X = np.random.default_rng(0).normal(size=(4, 3))
    g = Graph(4, [(0, 1), (1, 2)], X, [0, 1, 0, 1], 2)
    m = perturbed(init_model(Architecture(kind, 3, 2, 2, 4), 2))
    mlp = init_model(Architecture("mlp", 3, 2, 2, 4), 0)
    P, Q = m.layout.views(m.theta), mlp.layout.views(mlp.theta)
    for l in range(2):
        Q[f"W{l}"][...] = P[f"W{l}"] if kind == "gcn" else P[f"Ws{l}"]
        Q[f"b{l}"][...] = P[f"b{l}"]
    got = forward(m, g, build_normalized_adjacency(g))[3]
    np.testing.assert_allclose(got, forward(mlp, g)[3], atol=1e-14)


def test_glorot_bounds_and_determinism():
    arch = Architecture("mlp", 32, 32, 2, 32)
    bound = np.sqrt(6 / 64)
    for seed in range(100):
        W = init_model(arch, seed).layout.views(init_model(arch, seed).theta)["W1"]
        assert np.all(np.abs(W) <= bound)
    a, b = init_model(arch, 3), init_model(arch, 3)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert np.all(a.layout.views(a.theta)["b0"] == 0)


@pytest.mark.parametrize("kind", ["gcn", "sage"])
def test_egnn_stitch_preserves_logits(kind, small_graph):
    adj = build_normalized_adjacency(small_graph)
    base = perturbed(init_model(Architecture(kind, small_graph.feature_dim, 2), 0))
    egnn = stitch_egnn(base)
    assert forward(egnn, small_graph, adj).tobytes() == forward(base, small_graph, adj).tobytes()
    peer = Architecture("mlp", small_graph.feature_dim, 2).layout().size
    assert egnn.editable_mask.sum() == peer
    assert not egnn.editable_mask[:base.layout.size].any()
    fresh = init_model(Architecture("egnn-" + kind, small_graph.feature_dim, 2), 0)
    P = fresh.layout.views(fresh.theta)
    assert forward(fresh, small_graph, adj).tobytes() == (
        forward(fresh.with_theta(np.where(fresh.editable_mask, 0.0, fresh.theta)), small_graph, adj).tobytes())
    with pytest.raises(ValueError):
        stitch_egnn(egnn)
    with pytest.raises(ValueError):
        stitch_egnn(init_model(Architecture("mlp", small_graph.feature_dim, 2), 0))


def test_egnn_gradient_masked_to_peer(small_graph):
    adj = build_normalized_adjacency(small_graph)
    egnn = perturbed(stitch_egnn(init_model(Architecture("gcn", small_graph.feature_dim, 2), 0)))
    _, full = loss_and_grad(egnn, small_graph, adj, [0, 3], editable_only=False)
    _, masked = loss_and_grad(egnn, small_graph, adj, [0, 3])
    assert np.any(full.data[~egnn.editable_mask] != 0)
    assert np.all(masked.data[~egnn.editable_mask] == 0)
    np.testing.assert_array_equal(masked.data[egnn.editable_mask], full.data[egnn.editable_mask])


def test_train_trivial_cases(small_graph):
    adj = build_normalized_adjacency(small_graph)
    m = init_model(Architecture("gcn", small_graph.feature_dim, 2, dropout=0.0), 0)
    same, curve = train_base(m, small_graph, adj, epochs=0)
    assert same.theta.tobytes() == m.theta.tobytes() and curve == []
    for opt in ("gd", "adam"):
        _, flat = train_base(m, small_graph, adj, epochs=5, lr=0.0, optimizer=opt)
        assert len(set(flat)) == 1


def test_train_reproducible(small_graph):
    adj = build_normalized_adjacency(small_graph)
    m = init_model(Architecture("sage", small_graph.feature_dim, 2), 4)
    a, ca = train_base(m, small_graph, adj, 20)
    b, cb = train_base(m, small_graph, adj, 20)
    assert a.theta.tobytes() == b.theta.tobytes() and ca == cb


def test_train_divergence_detected(small_graph):
    adj = build_normalized_adjacency(small_graph)
    m = init_model(Architecture("mlp", small_graph.feature_dim, 2, dropout=0.0), 0)
    with pytest.raises(TrainingDivergedError), np.errstate(all="ignore"):
        train_base(m, small_graph, adj, 50, lr=1e300, optimizer="gd")


@pytest.mark.parametrize("optimizer", ["adam", "gd"])
def test_two_block_sbm_trains(optimizer):
    g = generate_sbm(2, 100, 0.3, 0.02, 16, seed=0)
    split = split_stratified(g.labels, 20, 30, seed=0)
    from gnnedit.graphcore import induce_training_subgraph
    sub = induce_training_subgraph(g, split)
    adj = build_normalized_adjacency(sub)
    m, curve = train_base(init_model(Architecture("gcn", 16, 2), 0), sub, adj, 200, 0.01,
                          optimizer=optimizer)
    assert accuracy(m, sub, adj, np.arange(sub.num_nodes)) >= 0.95
    assert curve[-1] < curve[0]


def test_predict_tie_rule_and_one_hot():
    g = Graph(2, [], np.array([[0.0, 0.0], [0.0, 1.0]]), [0, 1], 2)
    m = init_model(Architecture("mlp", 2, 3, num_layers=1), 0)
    P = m.layout.views(m.theta)
    P["W0"][...] = np.array([[0, 0, 0], [0, 0, 5.0]])
    assert predict(m, g).tolist() == [0, 2]


def test_random_predictor_accuracy_binomial():
    C, n = 4, 4000
    rng = np.random.default_rng(0)
    g = Graph(n, [], rng.normal(size=(n, 3)), np.repeat(np.arange(C), n // C), C)
    accs = [accuracy(perturbed(init_model(Architecture("mlp", 3, C, 1), s), 1.0, s), g, None, np.arange(n))
            for s in range(5)]
    sd = np.sqrt((1 / C) * (1 - 1 / C) / n)
    # a random linear map on class-independent features cannot beat chance
    assert all(abs(a - 1 / C) < 3 * sd + 0.02 for a in accs)


def test_checkpoint_roundtrip(tmp_path, small_graph):
    m = perturbed(init_model(Architecture("egnn-sage", small_graph.feature_dim, 2), 0))
    save_checkpoint(m, tmp_path / "a")
    save_checkpoint(m, tmp_path / "b")
    assert (tmp_path / "a" / "params.f64").read_bytes() == (tmp_path / "b" / "params.f64").read_bytes()
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()
    back = load_checkpoint(tmp_path / "a")
    assert back.theta.tobytes() == m.theta.tobytes()
    assert np.array_equal(back.editable_mask, m.editable_mask)
    assert back.fingerprint() == m.fingerprint()


def test_forward_dimension_mismatch(small_graph):
    m = init_model(Architecture("gcn", small_graph.feature_dim + 1, 2), 0)
    with pytest.raises(ValueError):
        forward(m, small_graph, build_normalized_adjacency(small_graph))
