"""Basis construction: contrast chains, orthonormality, locality, filtering."""

import numpy as np
import pytest

from hmh.basis import (
    BasisError,
    FilterGains,
    KIND_INTER,
    KIND_INTRA,
    KIND_SCALING,
    assemble_basis,
    coarsest_basis,
    filter_features,
    helmert_chain,
    hop_energy_profile,
    inter_wavelets,
    intra_wavelets,
    lift_scaling,
)
from hmh.encoder import init_encoder_params
from hmh.graph import build_graph
from hmh.hierarchy import build_hierarchy


def random_tree(n, seed, threshold=4, d=8):
    rng = np.random.default_rng(seed)
    g = build_graph(rng.integers(0, n, size=(3 * n, 2)), n)
    x = rng.normal(size=(n, d))
    enc = init_encoder_params(np.random.default_rng(seed + 1), [d, 16])
    return g, x, build_hierarchy(g, x, enc, ratio=0.5, threshold=threshold,
                                 seed=seed)


class TestHelmertChain:
    def test_two_unit_masses(self):
        chain = helmert_chain([1.0, 1.0])
        assert np.allclose(chain[:, 0], [1 / np.sqrt(2), -1 / np.sqrt(2)])

    def test_three_unit_masses(self):
        chain = helmert_chain(np.ones(3))
        assert np.allclose(chain[:, 0], [np.sqrt(2 / 3), -1 / np.sqrt(6),
                                         -1 / np.sqrt(6)])
        assert np.allclose(chain[:, 1], [0, 1 / np.sqrt(2), -1 / np.sqrt(2)])

    def test_mass_weighted_gram(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = rng.integers(2, 9)
            masses = rng.uniform(0.2, 5.0, size=m)
            chain = helmert_chain(masses)
            gram = chain.T @ np.diag(masses) @ chain
            assert np.max(np.abs(gram - np.eye(m - 1))) < 1e-12
            # orthogonal to the constant direction under the mass weighting
            assert np.max(np.abs(masses @ chain)) < 1e-12

    def test_nonpositive_mass_rejected(self):
        with pytest.raises(BasisError):
            helmert_chain([1.0, 0.0])


class TestCoarsestBasis:
    def test_single_node(self):
        b = coarsest_basis(1)
        assert np.allclose(b.dense(), [[1.0]])

    def test_two_nodes(self):
        b = coarsest_basis(2)
        expect = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
        assert np.allclose(b.dense(), expect)

    def test_four_nodes_gram(self):
        b = coarsest_basis(4)
        assert np.allclose(b.dense()[:, 0], 0.5)
        assert b.gram_residual() < 1e-12


class TestLiftScaling:
    def test_one_parent_four_children(self):
        lifted = lift_scaling(np.array([1.0]), np.zeros(4, dtype=int))
        assert np.allclose(lifted, 0.5)

    def test_unequal_children_uniform(self):
        lifted = lift_scaling(np.full(2, 1 / np.sqrt(2)), np.array([0, 1, 1, 1]))
        assert np.allclose(lifted, 0.5)

    def test_identity_assignment(self):
        u = np.array([0.6, 0.8])
        assert np.allclose(lift_scaling(u, np.array([0, 1])), u)


class TestInterWavelets:
    def test_two_singletons(self):
        w = inter_wavelets(np.array([0, 1]), 2)
        assert np.allclose(np.abs(w[:, 0]), 1 / np.sqrt(2))

    def test_sizes_one_three(self):
        w = inter_wavelets(np.array([0, 1, 1, 1]), 2)
        expect = np.array([np.sqrt(3) / 2, -1 / (2 * np.sqrt(3)),
                           -1 / (2 * np.sqrt(3)), -1 / (2 * np.sqrt(3))])
        assert np.allclose(w[:, 0], expect)
        assert abs(np.linalg.norm(w[:, 0]) - 1) < 1e-12
        assert abs(w[:, 0].sum()) < 1e-12

    def test_three_equal_clusters_gram(self):
        hard = np.repeat([0, 1, 2], 2)
        w = inter_wavelets(hard, 3)
        cols = np.hstack([np.full((6, 1), 1 / np.sqrt(6)), w])
        gram = cols.T @ cols
        assert np.max(np.abs(gram - np.eye(3))) < 1e-12
        # block-constant over clusters
        for c in range(2):
            for k in range(3):
                vals = w[hard == k, c]
                assert np.ptp(vals) < 1e-12

    def test_empty_cluster_rejected(self):
        with pytest.raises(BasisError):
            inter_wavelets(np.array([0, 0]), 2)


class TestIntraWavelets:
    def test_singleton(self):
        assert intra_wavelets(np.array([3]), 6).shape == (6, 0)

    def test_pair(self):
        w = intra_wavelets(np.array([1, 4]), 6)
        assert np.allclose(w[[1, 4], 0], [1 / np.sqrt(2), -1 / np.sqrt(2)])
        assert np.allclose(np.delete(w, [1, 4], axis=0), 0)

    def test_triple_matches_chain(self):
        members = np.array([0, 2, 5])
        w = intra_wavelets(members, 7)
        chain = helmert_chain(np.ones(3))
        assert np.allclose(w[members], chain)
        outside = np.setdiff1d(np.arange(7), members)
        assert np.allclose(w[outside], 0)


class TestAssembleBasis:
    def test_single_level_tree_is_coarsest_basis(self):
        g = build_graph([(0, 1), (1, 2)], 3)
        x = np.eye(3)
        enc = init_encoder_params(np.random.default_rng(0), [3, 4])
        tree = build_hierarchy(g, x, enc, ratio=0.5, threshold=5, seed=0)
        assert tree.num_levels == 1
        (b,) = assemble_basis(tree)
        assert np.allclose(b.dense(), coarsest_basis(3).dense())

    def test_four_node_two_cluster_structure(self):
        # 4 nodes -> 2 clusters of 2 -> 1 supernode
        g = build_graph([(0, 1), (2, 3), (1, 2)], 4)
        x = np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]])
        enc = init_encoder_params(np.random.default_rng(5), [2, 8])
        tree = build_hierarchy(g, x, enc, ratio=0.5, threshold=1, seed=2,
                               coarsen_to_one=True)
        bases = assemble_basis(tree)
        b0 = bases[0]
        counts = b0.kind_counts()
        assert counts["scaling"] == 1
        assert counts["inter"] == tree.levels[1].n - 1
        assert counts["intra"] == 4 - tree.levels[1].n
        assert b0.gram_residual() < 1e-12
        assert np.all(b0.dense()[:, 0] > 0)

    def test_orthonormal_across_random_suite(self):
        for seed in range(6):
            n = int(np.random.default_rng(seed).integers(16, 200))
            _, _, tree = random_tree(n, seed)
            for b in assemble_basis(tree):
                assert b.gram_residual() < 1e-10

    def test_sparsity_near_linear(self):
        # nnz of each level's basis is O(n * depth); uneven k-means cluster
        # sizes cost a small constant over the balanced-size-2 ideal, so the
        # idealized n * (2 + levels-above) budget carries a factor-2 headroom
        for seed in (0, 1, 2):
            n = 256
            _, _, tree = random_tree(n, seed)
            bases = assemble_basis(tree)
            depth = tree.num_levels
            for b in bases:
                # constant offset covers the dense coarsest chain block
                budget = 2 * b.n * (2 + (depth - 1 - b.level)) + 40
                assert b.nnz <= budget, (b.level, b.nnz, budget)

    def test_sparsity_scales_linearly_in_nodes(self):
        # doubling n roughly doubles nnz at fixed depth-per-node structure
        dens = []
        for n in (128, 256, 512):
            _, _, tree = random_tree(n, 31)
            b0 = assemble_basis(tree)[0]
            dens.append(b0.nnz / (b0.n * tree.num_levels))
        assert max(dens) / min(dens) < 1.8, dens

    def test_intra_support_within_cluster(self):
        _, _, tree = random_tree(120, 7)
        bases = assemble_basis(tree)
        for b in bases[:-1]:
            hard = tree.levels[b.level].assignment.hard
            dense = b.dense()
            for c in b.columns_of_kind(KIND_INTRA):
                support = np.flatnonzero(np.abs(dense[:, c]) > 0)
                owners = np.unique(hard[support])
                assert owners.size == 1
                assert owners[0] == b.intra_owner[c]


class TestFiltering:
    def test_identity_gains_reconstruct(self):
        g, x, tree = random_tree(90, 11)
        bases = assemble_basis(tree)
        for b, level in zip(bases, tree.levels):
            out = filter_features(b, FilterGains.identity(b), level.features)
            assert np.max(np.abs(out - level.features)) < 1e-10

    def test_scaling_only_projects_to_mean_direction(self):
        _, x, tree = random_tree(50, 3)
        b = assemble_basis(tree)[0]
        gains = FilterGains(1.0, np.zeros(b.n - 1))
        out = filter_features(b, gains, tree.levels[0].features)
        u = b.dense()[:, 0]
        oracle = np.outer(u, u) @ tree.levels[0].features
        assert np.max(np.abs(out - oracle)) < 1e-10

    def test_scaling_column_is_eigvector(self):
        _, _, tree = random_tree(40, 5)
        b = assemble_basis(tree)[0]
        u = b.dense()[:, [0]]
        gains = FilterGains(0.5, np.ones(b.n - 1))
        out = filter_features(b, gains, u)
        assert np.max(np.abs(out - 0.5 * u)) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(9)
        _, _, tree = random_tree(60, 13)
        b = assemble_basis(tree)[0]
        gains = FilterGains.tied(b, 0.7, 1.5, 2.0)
        x = rng.normal(size=(b.n, 3))
        y = rng.normal(size=(b.n, 3))
        lhs = filter_features(b, gains, 2.0 * x - 3.0 * y)
        rhs = 2.0 * filter_features(b, gains, x) - 3.0 * filter_features(b, gains, y)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_no_cross_cluster_leakage(self):
        # zero scaling+inter gains: filtering a signal supported on one
        # cluster leaves disjoint clusters untouched
        _, _, tree = random_tree(80, 17)
        b = assemble_basis(tree)[0]
        hard = tree.levels[0].assignment.hard
        counts = np.bincount(hard)
        big = np.flatnonzero(counts >= 2)
        assert big.size >= 2
        src, other = big[0], big[1]
        sig = np.zeros((b.n, 1))
        sig[hard == src] = np.random.default_rng(0).normal(
            size=(int(counts[src]), 1))
        lam = np.zeros(b.n)
        lam[b.columns_of_kind(KIND_INTRA)] = 2.0
        out = filter_features(b, lam, sig)
        assert np.max(np.abs(out[hard == other])) < 1e-12


class TestHopEnergy:
    def test_single_node_support(self):
        g = build_graph([(0, 1), (1, 2)], 3)
        col = np.array([0.0, 2.0, 0.0])
        prof = hop_energy_profile(g, col)
        assert prof[0] == 1.0
        assert abs(prof.sum() - 1.0) < 1e-12

    def test_adjacent_pair(self):
        g = build_graph([(0, 1), (1, 2)], 3)
        col = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
        prof = hop_energy_profile(g, col)
        assert abs(prof[0] - 0.5) < 1e-12
        assert abs(prof[1] - 0.5) < 1e-12

    def test_zero_column_rejected(self):
        g = build_graph([(0, 1)], 2)
        with pytest.raises(BasisError):
            hop_energy_profile(g, np.zeros(2))

    def test_profile_sums_to_one(self):
        g, _, tree = random_tree(100, 23)
        b = assemble_basis(tree)[0]
        dense = b.dense()
        for c in range(0, b.n, 7):
            prof = hop_energy_profile(tree.levels[0].graph, dense[:, c])
            assert abs(prof.sum() - 1.0) < 1e-9
