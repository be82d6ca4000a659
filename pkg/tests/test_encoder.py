import math

import numpy as np
import pytest

from gradcheck import check_param_grads
from stagedefense.encoder import EMBED_DIM, GnnEncoder, GraphBatch
from stagedefense.provenance import FEATURE_DIM, CompactGraph


def random_graph(rng, n=None):
    n = int(rng.integers(1, 25)) if n is None else n
    X = np.zeros((n, FEATURE_DIM))
    X[np.arange(n), rng.integers(0, 6, n)] = 1.0
    X[:, 6:] = rng.random((n, FEATURE_DIM - 6))
    m = int(rng.integers(0, 3 * n))
    return CompactGraph(X, rng.integers(0, n, m), rng.integers(0, n, m))


def test_empty_graph_is_readout_of_zeros():
    enc = GnnEncoder(np.random.default_rng(1))
    enc.params["readout.b"][:] = np.linspace(-1, 1, EMBED_DIM)
    empty = CompactGraph(np.zeros((0, FEATURE_DIM)), np.zeros(0, int), np.zeros(0, int))
    np.testing.assert_array_equal(enc.encode(empty), np.tanh(enc.params["readout.b"]))


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    enc = GnnEncoder(rng)
    worst = 0.0
    for _ in range(20):
        g = random_graph(rng)
        base = enc.encode(g)
        for _ in range(100):
            out = enc.encode(g.permuted(rng.permutation(g.n_nodes)))
            worst = max(worst, np.max(np.abs(out - base)))
    assert worst < 1e-9


def test_two_node_hand_computed():
    # nodes u -> v, scalar features, hidden 1, embed 1
    enc = GnnEncoder(np.random.default_rng(0), hidden=1, embed=1, n_in=1)
    p = enc.params
    p["msg1.W_self"][:] = 0.5
    p["msg1.W_nbr"][:] = -0.25
    p["msg1.b"][:] = 0.1
    p["msg2.W_self"][:] = 1.5
    p["msg2.W_nbr"][:] = 0.75
    p["msg2.b"][:] = -0.2
    p["readout.W"][:] = 2.0
    p["readout.b"][:] = 0.05
    xu, xv = 0.4, -0.8
    # round 1: u has no in-neighbours, v's only in-neighbour is u
    u1 = math.tanh(0.5 * xu + 0.1)
    v1 = math.tanh(0.5 * xv - 0.25 * xu + 0.1)
    u2 = math.tanh(1.5 * u1 - 0.2)
    v2 = math.tanh(1.5 * v1 + 0.75 * u1 - 0.2)
    expected = math.tanh(2.0 * (u2 + v2) / 2 + 0.05)
    g = CompactGraph(np.array([[xu], [xv]]), np.array([0]), np.array([1]))
    assert enc.encode(g)[0] == pytest.approx(expected, abs=1e-15)


def test_output_shape_and_finite():
    rng = np.random.default_rng(2)
    enc = GnnEncoder(rng)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(1, 200)))
        g = CompactGraph(g.features * 50.0, g.src, g.dst)
        out = enc.encode(g)
        assert out.shape == (EMBED_DIM,) and np.all(np.isfinite(out))


def test_batch_matches_individual():
    rng = np.random.default_rng(3)
    enc = GnnEncoder(rng)
    graphs = [random_graph(rng) for _ in range(5)]
    G, _ = enc.encode_batch(GraphBatch.from_graphs(graphs))
    for i, g in enumerate(graphs):
        np.testing.assert_allclose(G[i], enc.encode(g), atol=1e-13)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    enc = GnnEncoder(rng)
    batch = GraphBatch.from_graphs([random_graph(rng) for _ in range(3)])
    head = rng.standard_normal((3, EMBED_DIM))

    def loss():
        G, _ = enc.encode_batch(batch)
        return float(np.sum(head * G))

    G, cache = enc.encode_batch(batch)
    grads = enc.backward(cache, head)
    assert check_param_grads(loss, enc.params, grads, rng) < 1e-5
