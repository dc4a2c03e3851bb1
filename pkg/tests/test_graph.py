"""Graph core: construction canonicalization, two-hop sets, Laplacian."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmh.graph import (
    GraphError,
    build_graph,
    normalized_laplacian,
    two_hop_set,
)


def bfs_two_hop(g, i):
    """Independent oracle: BFS to depth 2, excluding the start node."""
    seen = {i}
    frontier = {i}
    out = set()
    for _ in range(2):
        nxt = set()
        for u in frontier:
            for v in g.neighbors(u):
                v = int(v)
                if v not in seen:
                    nxt.add(v)
        out |= nxt
        seen |= nxt
        frontier = nxt
    return out


class TestBuildGraph:
    def test_single_edge_symmetrized(self):
        g = build_graph([(0, 1)], 2)
        assert list(g.degrees()) == [1, 1]
        assert g.num_entries == 2

    def test_self_loop_and_duplicate_direction(self):
        g = build_graph([(0, 0), (0, 1), (1, 0)], 2)
        assert g.num_edges == 1
        assert not np.any(g.col_indices == np.repeat([0, 1], g.degrees()))

    def test_triangle_degrees(self):
        g = build_graph([(0, 1), (1, 2), (2, 0)], 3)
        assert list(g.degrees()) == [2, 2, 2]

    def test_duplicate_weights_summed(self):
        g = build_graph([(0, 1), (0, 1)], 2, weights=[1.0, 2.0])
        assert g.weights is not None
        assert np.allclose(g.weights, [3.0, 3.0])

    def test_id_out_of_range(self):
        with pytest.raises(GraphError):
            build_graph([(0, 2)], 2)

    def test_non_finite_weight(self):
        with pytest.raises(GraphError):
            build_graph([(0, 1)], 2, weights=[np.inf])

    @given(st.integers(2, 60), st.integers(0, 200), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_property(self, n, m, seed):
        rng = np.random.default_rng(seed)
        edges = rng.integers(0, n, size=(m, 2))
        g = build_graph(edges, n)
        a = g.to_scipy()
        assert (a != a.T).nnz == 0
        g.validate()

    def test_transpose_permutation_roundtrip(self):
        rng = np.random.default_rng(3)
        g = build_graph(rng.integers(0, 20, size=(60, 2)), 20)
        perm = g.transpose_permutation()
        src = g.row_of_entry()
        dst = g.col_indices
        assert np.array_equal(src[perm], dst)
        assert np.array_equal(dst[perm], src)


class TestTwoHop:
    def test_path_center(self):
        # path a-b-c-d-e, query b -> {a, c, d}
        g = build_graph([(0, 1), (1, 2), (2, 3), (3, 4)], 5)
        assert set(two_hop_set(g, 1).tolist()) == {0, 2, 3}

    def test_isolated(self):
        g = build_graph([(0, 1)], 3)
        assert two_hop_set(g, 2).size == 0

    def test_complete_graph(self):
        edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
        g = build_graph(edges, 4)
        for i in range(4):
            assert set(two_hop_set(g, i).tolist()) == set(range(4)) - {i}

    @given(st.integers(2, 50), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_bfs_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        g = build_graph(rng.integers(0, n, size=(3 * n, 2)), n)
        for i in rng.integers(0, n, size=min(n, 8)):
            assert set(two_hop_set(g, int(i)).tolist()) == bfs_two_hop(g, int(i))


class TestNormalizedLaplacian:
    def test_single_edge(self):
        g = build_graph([(0, 1)], 2)
        lap = normalized_laplacian(g).toarray()
        assert np.allclose(lap, [[1, -1], [-1, 1]])

    def test_isolated_node_diagonal(self):
        g = build_graph([(0, 1)], 3)
        lap = normalized_laplacian(g).toarray()
        assert lap[2, 2] == 1.0
        assert np.allclose(lap[2, :2], 0) and np.allclose(lap[:2, 2], 0)

    def test_triangle_dense_oracle(self):
        g = build_graph([(0, 1), (1, 2), (2, 0)], 3)
        lap = normalized_laplacian(g).toarray()
        a = g.to_scipy().toarray()
        dinv = np.diag(1 / np.sqrt(a.sum(1)))
        assert np.allclose(lap, np.eye(3) - dinv @ a @ dinv)
        assert np.allclose(np.diag(lap), 1)
        off = lap[~np.eye(3, dtype=bool)]
        assert np.allclose(off, -0.5)

    @given(st.integers(2, 64), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_eigenvalues_in_0_2(self, n, seed):
        rng = np.random.default_rng(seed)
        g = build_graph(rng.integers(0, n, size=(2 * n, 2)), n)
        lap = normalized_laplacian(g).toarray()
        vals = np.linalg.eigvalsh(lap)
        assert vals.min() >= -1e-10
        assert vals.max() <= 2 + 1e-10
