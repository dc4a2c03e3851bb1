"""Sparse undirected graph core: CSR storage, neighborhood queries, Laplacian.

Everything downstream (encoder, coarsening, bases, benchmarks) works on the
immutable :class:`SparseGraph` defined here.  Graphs are canonical: symmetric,
self-loop free, deduplicated, with neighbor lists sorted ascending per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

INDEX_DTYPE = np.int32   # node indices (graphs up to ~2^31 nodes)
OFFSET_DTYPE = np.int64  # edge counts


class GraphError(ValueError):
    """Raised on malformed graph construction input."""


@dataclass(frozen=True)
class SparseGraph:
    """Compressed-row undirected adjacency with optional real edge weights.

    ``weights is None`` means every edge has weight 1.  ``col_indices`` is
    strictly increasing within each row, and every edge appears in both
    directions with equal weight.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_entries(self) -> int:
        """Directed entry count (2x the undirected edge count)."""
        return int(self.row_offsets[-1])

    @property
    def num_edges(self) -> int:
        return self.num_entries // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def edge_weights(self) -> np.ndarray:
        """Weights aligned with col_indices; ones when unweighted."""
        if self.weights is not None:
            return self.weights
        return np.ones(self.num_entries, dtype=np.float64)

    def row_of_entry(self) -> np.ndarray:
        """Source node of each directed CSR entry."""
        key = "row_of_entry"
        if key not in self._cache:
            self._cache[key] = np.repeat(
                np.arange(self.n, dtype=INDEX_DTYPE), self.degrees()
            )
        return self._cache[key]

    def transpose_permutation(self) -> np.ndarray:
        """Permutation p with entry e=(u,v) mapped to p[e]=(v,u).

        Lets asymmetric per-edge values (e.g. signed similarity weights) be
        transposed without rebuilding the CSR structure.
        """
        key = "transpose_perm"
        if key not in self._cache:
            src = self.row_of_entry().astype(np.int64)
            dst = self.col_indices.astype(np.int64)
            order_fwd = np.lexsort((dst, src))
            order_rev = np.lexsort((src, dst))
            perm = np.empty(self.num_entries, dtype=np.int64)
            perm[order_fwd] = order_rev
            self._cache[key] = perm
        return self._cache[key]

    def to_scipy(self, weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """CSR adjacency; pass ``weights`` to override stored edge data."""
        data = weights if weights is not None else self.edge_weights()
        return sp.csr_matrix(
            (np.asarray(data, dtype=np.float64), self.col_indices, self.row_offsets),
            shape=(self.n, self.n),
        )

    def validate(self) -> None:
        """Check canonical-form invariants; raises GraphError on violation."""
        if self.row_offsets.shape != (self.n + 1,):
            raise GraphError("row_offsets must have length n+1")
        if self.row_offsets[0] != 0 or np.any(np.diff(self.row_offsets) < 0):
            raise GraphError("row_offsets must be monotone starting at 0")
        if self.num_entries != len(self.col_indices):
            raise GraphError("row_offsets[-1] must equal len(col_indices)")
        for i in range(self.n):
            row = self.neighbors(i)
            if row.size and (np.any(np.diff(row) <= 0)):
                raise GraphError(f"row {i} not strictly increasing")
            if np.any(row == i):
                raise GraphError(f"self-loop at node {i}")
        a = self.to_scipy()
        if (a != a.T).nnz != 0:
            raise GraphError("adjacency is not symmetric")


def build_graph(
    edge_list: Sequence | np.ndarray,
    n: int,
    weights: Optional[Sequence | np.ndarray] = None,
) -> SparseGraph:
    """Canonicalize an edge list into a SparseGraph.

    Input may contain duplicates, self-loops and single-direction edges.
    Self-loops are dropped, both directions are added, and duplicate edges
    have their weights summed (count summed when unweighted).
    """
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphError(f"node id out of range [0, {n})")
    if weights is None:
        w = np.ones(len(edges), dtype=np.float64)
        weighted = False
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(edges),):
            raise GraphError("weights length must match edge list")
        if not np.all(np.isfinite(w)):
            raise GraphError("non-finite edge weight")
        weighted = True

    keep = edges[:, 0] != edges[:, 1]
    edges, w = edges[keep], w[keep]
    # Symmetrize, then collapse duplicates (summing weights).
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    if len(src):
        new = np.empty(len(src), dtype=bool)
        new[0] = True
        new[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
        group = np.cumsum(new) - 1
        usrc, udst = src[new], dst[new]
        uw = np.bincount(group, weights=ww)
    else:
        usrc = udst = np.empty(0, dtype=np.int64)
        uw = np.empty(0, dtype=np.float64)
    row_offsets = np.zeros(n + 1, dtype=OFFSET_DTYPE)
    np.add.at(row_offsets, usrc + 1, 1)
    np.cumsum(row_offsets, out=row_offsets)
    g = SparseGraph(
        n=n,
        row_offsets=row_offsets,
        col_indices=udst.astype(INDEX_DTYPE),
        weights=uw if weighted else None,
    )
    return g


def two_hop_set(g: SparseGraph, i: int) -> np.ndarray:
    """Nodes at shortest-path distance 1 or 2 from i, excluding i (sorted)."""
    if not (0 <= i < g.n):
        raise GraphError(f"node {i} out of range")
    one = g.neighbors(i)
    if one.size == 0:
        return np.empty(0, dtype=INDEX_DTYPE)
    parts = [g.neighbors(j) for j in one]
    parts.append(one)
    out = np.unique(np.concatenate(parts))
    return out[out != i].astype(INDEX_DTYPE)


def two_hop_matrix(g: SparseGraph) -> sp.csr_matrix:
    """Boolean reachability-within-2-hops matrix (diagonal removed)."""
    key = "two_hop_matrix"
    if key not in g._cache:
        a = g.to_scipy(np.ones(g.num_entries))
        b = (a + a @ a).tocsr()
        b.setdiag(0)
        b.eliminate_zeros()
        b.data = np.ones_like(b.data)
        g._cache[key] = b
    return g._cache[key]


def normalized_laplacian(g: SparseGraph) -> sp.csr_matrix:
    """L = I - D^{-1/2} A D^{-1/2}; isolated nodes keep diagonal 1."""
    if g.n == 0:
        raise GraphError("empty graph")
    a = g.to_scipy()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(g.n, dtype=np.float64)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    lap = sp.identity(g.n, format="csr") - d @ a @ d
    return lap.tocsr()
