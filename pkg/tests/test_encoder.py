"""Encoder: affinities, similarity normalization, signed propagation."""

import numpy as np
import pytest

from hmh.encoder import (
    EncoderError,
    EncoderLayer,
    EncoderParams,
    adaptive_adjacency,
    combined_similarity,
    edge_structural_similarities,
    encoder_forward,
    feature_affinity,
    init_encoder_params,
    logistic,
    structural_similarity,
)
from hmh.graph import build_graph


def path_graph(k):
    return build_graph([(i, i + 1) for i in range(k - 1)], k)


class TestFeatureAffinity:
    def test_zero_weights_give_half(self):
        assert feature_affinity(np.array([3.0, -1.0]), np.array([2.0, 5.0]),
                                np.zeros(4)) == 0.5

    def test_scalar_logistic(self):
        val = feature_affinity(np.array([1.0]), np.array([0.0]),
                               np.array([1.0, 1.0]))
        assert abs(val - 1.0 / (1.0 + np.exp(-1.0))) < 1e-12

    def test_saturation_stays_finite_and_open(self):
        val = feature_affinity(np.array([-1e6]), np.array([7.0]),
                               np.array([1.0, 0.0]))
        assert 0.0 < val < 1.0 and np.isfinite(val)
        val = feature_affinity(np.array([1e6]), np.array([7.0]),
                               np.array([1.0, 0.0]))
        assert 0.0 < val < 1.0 and np.isfinite(val)

    def test_dimension_mismatch(self):
        with pytest.raises(EncoderError):
            feature_affinity(np.ones(2), np.ones(2), np.ones(3))

    def test_asymmetric_in_general(self):
        w = np.array([1.0, 0.0, 0.0, 2.0])
        hi, hj = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert feature_affinity(hi, hj, w) != feature_affinity(hj, hi, w)


class TestStructuralSimilarity:
    def test_identical_two_hop_sets(self):
        # a node shares its own two-hop set exactly; adjacent pairs never can
        # (each endpoint sits in the other's set but not its own)
        g = build_graph([(0, 1), (1, 2), (2, 0)], 3)
        assert structural_similarity(g, 0, 0) == 1.0
        assert abs(structural_similarity(g, 0, 1) - 1.0 / 3.0) < 1e-12

    def test_disjoint_sets(self):
        # two far-apart nodes of a long path share nothing
        g = path_graph(9)
        assert structural_similarity(g, 0, 8) == 0.0

    def test_path_pair(self):
        # path a-b-c-d-e: N2(b) = {a,c,d}, N2(d) = {b,c,e} -> 1/5
        g = path_graph(5)
        assert abs(structural_similarity(g, 1, 3) - 0.2) < 1e-12

    def test_empty_union_returns_zero(self):
        g = build_graph([(0, 1)], 4)  # nodes 2, 3 isolated
        assert structural_similarity(g, 2, 3) == 0.0

    def test_edge_batch_matches_pairwise(self):
        rng = np.random.default_rng(2)
        g = build_graph(rng.integers(0, 30, size=(80, 2)), 30)
        per_edge = edge_structural_similarities(g)
        src = g.row_of_entry()
        for e in rng.integers(0, g.num_entries, size=20):
            i, j = int(src[e]), int(g.col_indices[e])
            assert abs(per_edge[e] - structural_similarity(g, i, j)) < 1e-12


class TestCombinedSimilarity:
    def make(self, g, d=3, seed=0):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(g.n, d)), EncoderLayer(
            w_att=rng.normal(size=2 * d), W=np.eye(d))

    def test_softmax_singleton_row(self):
        g = build_graph([(0, 1), (1, 2)], 3)
        h, layer = self.make(g)
        sim = combined_similarity(g, h, layer, "softmax")
        # nodes 0 and 2 have exactly one neighbor
        assert sim.values[g.row_offsets[0]] == 1.0
        assert sim.values[g.row_offsets[2]] == 1.0

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        g = build_graph(rng.integers(0, 40, size=(120, 2)), 40)
        h, layer = self.make(g, seed=5)
        sim = combined_similarity(g, h, layer, "softmax")
        for i in range(g.n):
            row = sim.values[g.row_offsets[i]:g.row_offsets[i + 1]]
            if row.size:
                assert abs(row.sum() - 1.0) < 1e-9

    def test_equal_scores_split_evenly(self):
        g = build_graph([(0, 1), (0, 2)], 3)
        h = np.zeros((3, 2))
        layer = EncoderLayer(w_att=np.zeros(4), W=np.eye(2))
        sim = combined_similarity(g, h, layer, "softmax")
        row = sim.values[g.row_offsets[0]:g.row_offsets[0 + 1]]
        assert np.allclose(row, 0.5)

    def test_softmax_oracle_two_neighbors(self):
        # raw scores (1, 0) -> (0.7311, 0.2689)
        e = np.exp(1.0)
        expect = np.array([e, 1.0]) / (e + 1.0)
        scores = np.array([1.0, 0.0])
        shifted = np.exp(scores - scores.max())
        assert np.allclose(shifted / shifted.sum(), expect, atol=1e-4)

    def test_sigmoid_mode_in_unit_interval(self):
        rng = np.random.default_rng(6)
        g = build_graph(rng.integers(0, 25, size=(70, 2)), 25)
        h, layer = self.make(g, seed=6)
        sim = combined_similarity(g, h, layer, "sigmoid")
        assert np.all(sim.values > 0) and np.all(sim.values < 1)

    def test_nonfinite_feature_rejected(self):
        g = build_graph([(0, 1)], 2)
        h = np.array([[np.nan, 0.0], [0.0, 0.0]])
        layer = EncoderLayer(w_att=np.zeros(4), W=np.eye(2))
        with pytest.raises(EncoderError):
            combined_similarity(g, h, layer)


class TestAdaptiveAdjacency:
    @pytest.mark.parametrize("sim,weight", [(0.5, 0.0), (1.0, 1.0), (0.25, -0.5)])
    def test_affine_map(self, sim, weight):
        g = build_graph([(0, 1)], 2)
        from hmh.encoder import EdgeSimilarity

        s = EdgeSimilarity(g, np.full(2, sim), "sigmoid")
        a = adaptive_adjacency(s, g)
        assert np.allclose(a.weights, weight)


class TestEncoderForward:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(1)
        g = build_graph(rng.integers(0, 10, size=(20, 2)), 10)
        x = rng.normal(size=(10, 3))
        params = EncoderParams([
            EncoderLayer(np.zeros(6), np.zeros((3, 3))),
            EncoderLayer(np.zeros(6), np.zeros((3, 3))),
        ])
        z, adps = encoder_forward(g, x, params)
        assert np.allclose(z, 0)
        assert len(adps) == 2

    def test_edgeless_graph_zero_after_first_layer(self):
        g = build_graph(np.empty((0, 2)), 5)
        x = np.random.default_rng(0).normal(size=(5, 2))
        params = EncoderParams([EncoderLayer(np.zeros(4), np.eye(2))])
        z, _ = encoder_forward(g, x, params)
        assert np.allclose(z, 0)

    def test_two_node_dense_oracle(self):
        g = build_graph([(0, 1)], 2)
        x = np.array([[2.0], [-3.0]])
        w_att = np.array([0.3, -0.2])
        params = EncoderParams([EncoderLayer(w_att, np.eye(1))])
        z, (adp,) = encoder_forward(g, x, params)
        # singleton neighborhoods: softmax similarity is 1, weight 2*1-1 = 1
        assert np.allclose(adp.weights, 1.0)
        dense = adp.to_scipy().toarray()
        assert np.allclose(z, np.maximum(dense @ x, 0.0))

    def test_dimension_chain_error(self):
        g = build_graph([(0, 1)], 2)
        params = EncoderParams([EncoderLayer(np.zeros(4), np.eye(2))])
        with pytest.raises(EncoderError):
            encoder_forward(g, np.zeros((2, 3)), params)


class TestSignFlipBehavior:
    def test_fixed_sign_involution_reproduces_state(self):
        # disjoint signed pairs: S^2 = I exactly, so linear 2-step returns H
        from hmh.model import smp_forward
        import scipy.sparse as sp

        g = build_graph([(0, 1), (2, 3)], 4)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        signs = sp.csr_matrix(np.kron(np.eye(2), [[0, -1], [-1, 0]]))
        outs = smp_forward(g, x, labels=None, n_layers=4, sign_matrix=signs)
        assert np.allclose(outs[2], outs[0])
        assert np.allclose(outs[4], outs[2])

    def test_adaptive_encoder_avoids_two_step_oscillation(self):
        # linear mode; no scalar s in {-1, +1} relates Z^{k+2} to Z^{k}
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(12, 60))
            g = build_graph(rng.integers(0, n, size=(3 * n, 2)), n)
            x = rng.normal(size=(n, 4))
            params = EncoderParams(
                [EncoderLayer(rng.normal(size=8), np.eye(4)) for _ in range(4)],
                activation="identity",
            )
            z0 = x
            zs = [z0]
            z = x
            for k in range(4):
                zk, _ = encoder_forward(
                    g, zs[-1], EncoderParams([params.layers[k]], "identity"))
                zs.append(zk)
            ok = True
            for k in range(len(zs) - 2):
                a, b = zs[k + 2], zs[k]
                for s in (1.0, -1.0):
                    if np.max(np.abs(a - s * b)) <= 1e-6:
                        ok = False
            hits += ok
        assert hits >= 9

    def test_consecutive_adjacencies_differ(self):
        rng = np.random.default_rng(4)
        n = 40
        g = build_graph(rng.integers(0, n, size=(120, 2)), n)
        x = rng.normal(size=(n, 5))
        params = init_encoder_params(rng, [5, 5, 5])
        _, adps = encoder_forward(g, x, params)
        diff = np.max(np.abs(adps[1].weights - adps[0].weights))
        assert diff > 1e-6


class TestAdaptiveFilterDirection:
    def test_two_block_sign_structure(self):
        # within-block similarity forced high and cross-block low: the signed
        # map sends within-block edges positive and cross-block negative
        from hmh.encoder import EdgeSimilarity

        g = build_graph([(0, 1), (2, 3), (1, 2)], 4)
        blocks = np.array([0, 0, 1, 1])
        src = g.row_of_entry()
        same = blocks[src] == blocks[g.col_indices]
        sim = EdgeSimilarity(g, np.where(same, 0.9, 0.3), "sigmoid")
        a = adaptive_adjacency(sim, g)
        assert np.all(a.weights[same] > 0)
        assert np.all(a.weights[~same] < 0)

    def test_saturated_similarity_keeps_open_interval(self):
        g = build_graph([(0, 1)], 2)
        x = np.array([[1e4], [-1e4]])
        layer = EncoderLayer(w_att=np.array([1.0, 1.0]), W=np.eye(1))
        sim = combined_similarity(g, x, layer, "sigmoid")
        assert np.all(sim.values > 0.0) and np.all(sim.values < 1.0)
