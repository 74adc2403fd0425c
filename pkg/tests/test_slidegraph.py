import numpy as np
import pytest

from slidegcd import numerics as nx
from slidegcd.errors import DimensionError, GraphError, ParameterError
from slidegcd.numerics import Tensor
from slidegcd.slidegraph import (GnnParams, SlideGraph, build_graph, center_scores, centering_attention,
                                 gcn_conv, graph_classify, hop_concat, hypergraph_conv, init_gnn_params,
                                 propagation_matrix, slide_gnn_forward)

from conftest import param


def knn_oracle_edges(P, k):
    n = len(P)
    edges = []
    for i in range(n):
        d = sorted((float(((P[i] - P[j]) ** 2).sum()), j) for j in range(n) if j != i)
        edges.append([i] + [j for _, j in d[:k]])
    return np.array(edges)


class TestBuildGraph:
    def test_colinear_example(self):
        X = np.array([[0.0], [1.0], [2.0], [10.0]])
        g = build_graph(X, None, 1)
        assert g.hyperedges == [frozenset({0, 1}), frozenset({1, 0}), frozenset({2, 1}), frozenset({3, 2})]
        np.testing.assert_array_equal(g.edges, [[0, 1], [1, 0], [2, 1], [3, 2]])

    def test_complete(self, rng):
        g = build_graph(rng.normal(size=(6, 3)), None, 5)
        assert all(e == frozenset(range(6)) for e in g.hyperedges)

    def test_duplicates_deterministic(self):
        X = np.array([[1.0, 1.0]] * 4 + [[0.0, 0.0]])
        a = build_graph(X, None, 2).edges
        b = build_graph(X, None, 2).edges
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a[:4, 1:], [[1, 2], [0, 2], [0, 1], [0, 1]])

    def test_projection_and_oracle(self, rng):
        X = rng.normal(size=(40, 8))
        W = rng.normal(size=(8, 5))
        g = build_graph(X, W, 6)
        np.testing.assert_array_equal(g.edges, knn_oracle_edges(X @ W, 6))
        np.testing.assert_allclose(g.P, X @ W)

    def test_structure(self, rng):
        g = build_graph(rng.normal(size=(30, 4)), rng.normal(size=(4, 3)), 4)
        assert len(g.hyperedges) == 30
        assert all(len(e) == 5 and i in e for i, e in enumerate(g.hyperedges))

    def test_k_too_large(self, rng):
        with pytest.raises(ParameterError):
            build_graph(rng.normal(size=(4, 2)), None, 4)


class TestHypergraphConv:
    def test_single_node(self):
        X = np.array([[1.0, -2.0, 3.0]])
        out = hypergraph_conv(X, [[0]], np.eye(3), slope=0.1).data
        np.testing.assert_allclose(out, [[1.0, -0.2, 3.0]])

    def test_two_nodes_one_edge(self, rng):
        X = np.abs(rng.normal(size=(2, 3)))
        out = hypergraph_conv(X, [[0, 1]], np.eye(3)).data
        np.testing.assert_allclose(out, np.tile(X.mean(0), (2, 1)), atol=1e-12)

    def test_equal_features_fixed_point(self, rng):
        # symmetric normalisation only preserves constant rows when node degrees agree
        X = np.tile(np.abs(rng.normal(size=4)), (12, 1))
        g = build_graph(rng.normal(size=X.shape), None, 11)
        out = hypergraph_conv(X, g.edges, np.eye(4)).data
        assert np.max(np.abs(out - out[0])) <= 1e-6

    def test_isolated_node(self):
        with pytest.raises(GraphError):
            hypergraph_conv(np.ones((3, 2)), [[0, 1]], np.eye(2))

    def test_gradcheck(self, rng):
        g = build_graph(rng.normal(size=(6, 3)), None, 2)
        for _ in range(3):
            X, theta = param(rng.normal(size=(6, 3))), param(rng.normal(size=(3, 3)))
            w = rng.normal(size=(6, 3))
            err = nx.grad_check(lambda X, th: nx.sum_(nx.mul(hypergraph_conv(X, g.edges, th), w)), [X, theta])
            assert err <= 1e-4


class TestGcnConv:
    def test_single_node(self):
        out = gcn_conv(np.array([[2.0, -1.0]]), [[0]], np.eye(2)).data
        np.testing.assert_allclose(out, [[2.0, -0.01]])

    def test_two_nodes(self, rng):
        X = np.abs(rng.normal(size=(2, 3)))
        out = gcn_conv(X, [[0, 1], [1, 0]], np.eye(3)).data
        np.testing.assert_allclose(out, np.tile(X.mean(0), (2, 1)), atol=1e-12)

    def test_star_expansion_is_deduplicated(self):
        op = propagation_matrix([[0, 1], [1, 0]], 2, "gcn")
        np.testing.assert_allclose(op, 0.5)

    def test_gradcheck(self, rng):
        g = build_graph(rng.normal(size=(6, 3)), None, 2)
        X, theta = param(rng.normal(size=(6, 3))), param(rng.normal(size=(3, 3)))
        w = rng.normal(size=(6, 3))
        assert nx.grad_check(lambda X, th: nx.sum_(nx.mul(gcn_conv(X, g.edges, th), w)), [X, theta]) <= 1e-4


class TestHopConcat:
    def test_blocks(self, rng):
        xs = [rng.normal(size=(4, 2)) for _ in range(3)]
        H = hop_concat(*xs).data
        assert H.shape == (4, 6)
        for b in range(3):
            np.testing.assert_array_equal(H[:, 2 * b:2 * b + 2], xs[b])

    def test_zero_hops(self, rng):
        X0 = rng.normal(size=(3, 2))
        H = hop_concat(X0, np.zeros((3, 2)), np.zeros((3, 2))).data
        np.testing.assert_array_equal(H[:, :2], X0)
        assert not H[:, 2:].any()

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            hop_concat(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 2)))


class TestCenteringAttention:
    def test_constant_scores_zero_output(self, rng):
        H = rng.normal(size=(5, 6))
        # W1 = 0 gives sigmoid(0) = 0.5 on every channel
        Hp, a = centering_attention(H, rng.normal(size=(6, 2)), np.zeros((2, 6)))
        np.testing.assert_array_equal(a.data, 0.5)
        np.testing.assert_array_equal(Hp.data, 0.0)

    def test_forced_scores(self):
        np.testing.assert_allclose(center_scores(np.array([0.2, 0.5, 0.8])).data, [-0.3, 0.0, 0.3], atol=1e-15)
        H = np.ones((2, 3))
        Hp, _ = centering_attention(H, None, None, scores=[0.2, 0.5, 0.8])
        np.testing.assert_allclose(Hp.data, [[-0.3, 0.0, 0.3]] * 2, atol=1e-15)

    def test_sum_to_zero(self, rng):
        for _ in range(20):
            H = rng.normal(size=(7, 9)) * 2
            _, a = centering_attention(H, rng.normal(size=(9, 3)), rng.normal(size=(3, 9)))
            assert abs(center_scores(a).data.sum()) <= 1e-9
            assert np.all((a.data > 0) & (a.data < 1))

    def test_gradcheck(self, rng):
        H, W0, W1 = param(rng.normal(size=(5, 6))), param(rng.normal(size=(6, 2))), param(rng.normal(size=(2, 6)))
        w = rng.normal(size=(5, 6))
        err = nx.grad_check(lambda H, W0, W1: nx.sum_(nx.mul(centering_attention(H, W0, W1)[0], w)), [H, W0, W1])
        assert err <= 1e-4


class TestGraphClassify:
    def test_empty_mask(self, rng):
        out = graph_classify(rng.normal(size=(4, 6)), rng.normal(size=(6, 2)), np.zeros(2), np.zeros(4, bool))
        assert out.shape == (0, 2)

    def test_zero_classifier_uniform(self, rng):
        out = graph_classify(rng.normal(size=(4, 6)), np.zeros((6, 3)), np.zeros(3), [1, 3])
        np.testing.assert_allclose(nx.softmax(out, axis=1).data, 1 / 3)

    def test_masked_rows_match_full(self, rng):
        H, W, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 2)), rng.normal(size=2)
        mask = np.array([0, 0, 0, 0, 1, 1], bool)
        np.testing.assert_allclose(graph_classify(H, W, b, mask).data, (H @ W + b)[4:], atol=1e-12)

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            graph_classify(rng.normal(size=(3, 6)), np.zeros((6, 2)), np.zeros(2), [3])


def f64_gnn(rng, d_s=3, C=2):
    p = init_gnn_params(d_s, C, rng, d_proj=4, dtype=np.float64)
    p.cls_b.data = rng.normal(size=C)
    return p


class TestSlideGnn:
    @pytest.mark.parametrize("conv", ["hyper", "gcn"])
    def test_composite_gradcheck(self, rng, conv):
        p = f64_gnn(rng)
        X0 = param(rng.normal(size=(8, 3)))
        edges = build_graph(X0, p.proj, 3).edges
        mask = np.array([0, 0, 0, 0, 0, 1, 1, 1], bool)
        w = rng.normal(size=(3, 2))

        def f(X0, t1, t2, W0, W1, cW, cb):
            q = GnnParams(p.proj, t1, t2, W0, W1, cW, cb, p.slope)
            act = slide_gnn_forward(SlideGraph(X0, edges, None), q, mask, conv)
            return nx.sum_(nx.mul(act.logits, w))

        assert nx.grad_check(f, [X0, *p.tensors().values()]) <= 1e-3

    def test_permutation_equivariance(self, rng):
        p = init_gnn_params(4, 3, rng, d_proj=6, dtype=np.float64)
        X0 = rng.normal(size=(12, 4))
        mask = np.zeros(12, bool)
        mask[[2, 7, 9]] = True
        perm = rng.permutation(12)
        a = slide_gnn_forward(build_graph(X0, p.proj, 4), p, mask).logits.data
        b = slide_gnn_forward(build_graph(X0[perm], p.proj, 4), p, mask[perm]).logits.data
        # masked rows come out in node order; map them back through the permutation
        order_a = np.flatnonzero(mask)
        order_b = perm[np.flatnonzero(mask[perm])]
        np.testing.assert_allclose(b[np.argsort(order_b)], a[np.argsort(order_a)], atol=1e-6)

    def test_activation_shapes(self, rng):
        p = init_gnn_params(4, 2, rng, d_proj=5)
        act = slide_gnn_forward(build_graph(rng.normal(size=(10, 4)).astype(np.float32), p.proj, 3), p,
                                np.arange(10) >= 8)
        assert act.H.shape == (10, 12) and act.a.shape == (1, 12) and act.logits.shape == (2, 2)
        assert act.X1.dtype == np.float32
