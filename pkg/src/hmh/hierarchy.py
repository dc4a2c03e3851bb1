"""Cluster hierarchy construction: prototypes, soft assignment, aggregation.

The coarsening loop runs encoder -> cluster -> aggregate per level, producing
a tree of progressively smaller weighted graphs.  Two clusterers are provided:
``kmeans`` (k-means++ seeding plus Lloyd refinement on encoder scores, the
default) and ``matching`` (greedy heavy-edge matching, near-linear, used by
the large-scale benchmarks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .encoder import EncoderParams, encoder_forward
from .graph import SparseGraph
from .segments import segment_softmax

AssignMatrix = Union[np.ndarray, sp.csr_matrix]


class HierarchyError(ValueError):
    pass


def normalize_rows(Z: np.ndarray) -> np.ndarray:
    """L2-normalize score rows (zero rows stay zero).

    Clustering and assignment operate on unit-norm scores so that the raw
    inner-product affinity behaves like a cosine affinity; without this,
    non-negative activations make a few large-norm prototypes absorb every
    node's argmax.
    """
    Z = np.asarray(Z, dtype=np.float64)
    nrm = np.linalg.norm(Z, axis=1, keepdims=True)
    out = np.zeros_like(Z)
    nz = nrm[:, 0] > 0
    out[nz] = Z[nz] / nrm[nz]
    return out


@dataclass
class LevelAssignment:
    """Soft/hard membership of one level's nodes into next-level clusters."""

    soft: AssignMatrix          # (n, K) row-stochastic; CSR when candidate-sparse
    hard: np.ndarray            # (n,) parent cluster id = argmax of soft row
    prototypes: np.ndarray      # (K, d')
    tau: float
    candidates: Optional[sp.csr_matrix] = None  # support pattern when sparse

    @property
    def num_clusters(self) -> int:
        return self.prototypes.shape[0]


@dataclass
class HierarchyLevel:
    graph: SparseGraph
    features: np.ndarray
    encoder_scores: Optional[np.ndarray] = None
    assignment: Optional[LevelAssignment] = None

    @property
    def n(self) -> int:
        return self.graph.n


@dataclass
class HaarTree:
    levels: List[HierarchyLevel]
    ratio: float
    threshold: int
    coarsen_to_one: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def sizes(self) -> List[int]:
        return [lv.n for lv in self.levels]

    def ancestors(self) -> List[np.ndarray]:
        """ancestors()[l][j] = level-l ancestor cluster of level-0 node j.

        Entry 0 is the identity map; entries follow hardened parent links.
        """
        n0 = self.levels[0].n
        chains = [np.arange(n0, dtype=np.int64)]
        cur = chains[0]
        for lv in self.levels[:-1]:
            cur = lv.assignment.hard[cur]
            chains.append(cur)
        return chains


def level_size_schedule(
    n: int, ratio: float, threshold: int, coarsen_to_one: bool = False
) -> List[int]:
    """Node counts per level under K = max(1, floor(n * R)) until the stop."""
    if not 0.0 < ratio < 1.0:
        raise HierarchyError("ratio must be in (0, 1)")
    if threshold < 1:
        raise HierarchyError("threshold must be >= 1")
    stop = 1 if coarsen_to_one else threshold
    sizes = [n]
    while sizes[-1] > stop:
        sizes.append(max(1, int(np.floor(sizes[-1] * ratio))))
    return sizes


# ---------------------------------------------------------------------------
# k-means


def kmeanspp_seed(Z: np.ndarray, K: int, seed: int) -> np.ndarray:
    """k-means++ initialization: next center sampled with prob ~ D^2."""
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if not 1 <= K <= n:
        raise HierarchyError(f"K={K} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = np.empty((K, Z.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = Z[first]
    if K == 1:
        return centers
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with some center
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centers[k] = Z[idx]
        d2 = np.minimum(d2, np.sum((Z - centers[k]) ** 2, axis=1))
    return centers


def _nearest(Z: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin of squared distance, ties to the lowest center index
    d2 = (
        np.sum(Z * Z, axis=1)[:, None]
        - 2.0 * Z @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def lloyd_refine(
    Z: np.ndarray,
    centers: np.ndarray,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> np.ndarray:
    """Alternate assign/update until center movement < tol or max_iter.

    Clusters that come up empty are re-seeded to the point currently farthest
    from its nearest center.
    """
    Z = np.asarray(Z, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64, copy=True)
    K = centers.shape[0]
    for _ in range(max_iter):
        labels = _nearest(Z, centers)
        new_centers = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=K).astype(np.float64)
        np.add.at(new_centers, labels, Z)
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            d2 = np.sum((Z - new_centers[labels]) ** 2, axis=1)
            far_order = np.argsort(-d2, kind="stable")
            for slot, k in enumerate(np.flatnonzero(~nonempty)):
                new_centers[k] = Z[far_order[slot % len(far_order)]]
        move = float(np.max(np.abs(new_centers - centers))) if K else 0.0
        centers = new_centers
        if move < tol:
            break
    return centers


def spherical_refine(
    Z: np.ndarray,
    centers: np.ndarray,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> np.ndarray:
    """Lloyd-style refinement with inner-product assignment on unit prototypes.

    Assignment uses argmax <z, p_k> with p_k renormalized each iteration, so
    the returned prototypes reproduce the final partition exactly under the
    soft-assignment argmax.  Empty clusters are re-seeded to the farthest
    point (by affinity deficit).
    """
    Z = np.asarray(Z, dtype=np.float64)
    centers = normalize_rows(np.array(centers, dtype=np.float64, copy=True))
    K = centers.shape[0]
    for _ in range(max_iter):
        labels = np.argmax(Z @ centers.T, axis=1)
        new_centers = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=K).astype(np.float64)
        np.add.at(new_centers, labels, Z)
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            affinity = np.sum(Z * new_centers[labels], axis=1)
            far_order = np.argsort(affinity, kind="stable")
            for slot, k in enumerate(np.flatnonzero(~nonempty)):
                new_centers[k] = Z[far_order[slot % len(far_order)]]
        new_centers = normalize_rows(new_centers)
        move = float(np.max(np.abs(new_centers - centers))) if K else 0.0
        centers = new_centers
        if move < tol:
            break
    # final consistency pass: make sure the argmax partition fills every slot
    for _ in range(8):
        labels = np.argmax(Z @ centers.T, axis=1)
        counts = np.bincount(labels, minlength=K)
        if counts.min() > 0:
            break
        affinity = np.sum(Z * centers[labels], axis=1)
        far_order = np.argsort(affinity, kind="stable")
        for slot, k in enumerate(np.flatnonzero(counts == 0)):
            centers[k] = Z[far_order[slot % len(far_order)]]
        centers = normalize_rows(centers)
    return centers


# ---------------------------------------------------------------------------
# soft assignment


def soft_assign(Z: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    """Row-stochastic softmax of inner-product affinities divided by tau."""
    if tau <= 0:
        raise HierarchyError("tau must be > 0")
    omega = Z @ prototypes.T
    shifted = omega / tau
    shifted -= shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def soft_assign_sparse(
    Z: np.ndarray,
    prototypes: np.ndarray,
    tau: float,
    candidates: sp.csr_matrix,
) -> sp.csr_matrix:
    """Softmax over a per-node candidate subset of prototypes (CSR pattern)."""
    if tau <= 0:
        raise HierarchyError("tau must be > 0")
    rows = np.repeat(
        np.arange(Z.shape[0]), np.diff(candidates.indptr)
    )
    cols = candidates.indices
    omega = np.sum(Z[rows] * prototypes[cols], axis=1) / tau
    vals = segment_softmax(omega, candidates.indptr)
    out = sp.csr_matrix(
        (vals, cols.copy(), candidates.indptr.copy()), shape=candidates.shape
    )
    return out


def harden(soft: AssignMatrix) -> np.ndarray:
    """Argmax cluster per row; ties to the lowest cluster index."""
    if sp.issparse(soft):
        soft = soft.tocsr()
        hard = np.empty(soft.shape[0], dtype=np.int64)
        for i in range(soft.shape[0]):
            lo, hi = soft.indptr[i], soft.indptr[i + 1]
            seg = soft.data[lo:hi]
            cols = soft.indices[lo:hi]
            order = np.argsort(cols, kind="stable")
            seg, cols = seg[order], cols[order]
            hard[i] = cols[int(np.argmax(seg))]
        return hard
    return np.argmax(soft, axis=1).astype(np.int64)


def _harden_sparse_fast(soft: sp.csr_matrix) -> np.ndarray:
    """Vectorized argmax per CSR row with lowest-column-index tie break.

    Assumes column indices are sorted within each row (scipy canonical form).
    """
    from .segments import expand, segment_max

    indptr, indices, data = soft.indptr, soft.indices, soft.data
    n = soft.shape[0]
    rows = np.repeat(np.arange(n), np.diff(indptr))
    m = segment_max(data, indptr, fill=-np.inf)
    pos = np.flatnonzero(data >= expand(m, indptr))
    row_of = rows[pos]
    keep = np.ones(len(pos), dtype=bool)  # first max per row wins the tie
    keep[1:] = row_of[1:] != row_of[:-1]
    out = np.zeros(n, dtype=np.int64)
    out[row_of[keep]] = indices[pos[keep]]
    return out


def aggregate_features(X: np.ndarray, soft: AssignMatrix) -> np.ndarray:
    """Coarse features: transpose-product of the soft assignment with X."""
    if sp.issparse(soft):
        return np.asarray((soft.T @ X))
    return soft.T @ X


def aggregate_adjacency(g: SparseGraph, hard: np.ndarray, K: int) -> SparseGraph:
    """Coarse weighted graph: sum of fine edge weights between cluster pairs.

    The diagonal (within-cluster mass) is dropped.
    """
    hard = np.asarray(hard, dtype=np.int64)
    if hard.size and hard.max() >= K:
        raise HierarchyError("parent id out of range")
    src = hard[g.row_of_entry()]
    dst = hard[g.col_indices]
    w = g.edge_weights()
    keep = src != dst
    coo = sp.coo_matrix((w[keep], (src[keep], dst[keep])), shape=(K, K))
    csr = coo.tocsr()
    csr.sum_duplicates()
    csr.sort_indices()
    return SparseGraph(
        n=K,
        row_offsets=csr.indptr.astype(np.int64),
        col_indices=csr.indices.astype(np.int32),
        weights=csr.data.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# matching clusterer (near-linear alternative for large graphs)


def matching_clusters(g: SparseGraph, seed: int) -> np.ndarray:
    """Greedy heavy-edge matching; unmatched nodes become singleton clusters.

    Returns hard parent ids with clusters numbered by their smallest member.
    """
    rows = g.row_of_entry()
    cols = g.col_indices
    w = g.edge_weights()
    upper = rows < cols
    eu, ev, ew = rows[upper], cols[upper].astype(np.int64), w[upper]
    rng = np.random.default_rng(seed)
    jitter = rng.random(len(ew)) * 1e-9  # deterministic tie-shuffle per seed
    order = np.lexsort((eu, -(ew + jitter)))
    matched = np.full(g.n, -1, dtype=np.int64)
    for e in order:
        u, v = int(eu[e]), int(ev[e])
        if matched[u] < 0 and matched[v] < 0:
            matched[u] = v
            matched[v] = u
    # number clusters by smallest member
    rep = np.arange(g.n, dtype=np.int64)
    has = matched >= 0
    rep[has] = np.minimum(np.arange(g.n)[has], matched[has])
    reps = np.unique(rep)
    remap = np.full(g.n, -1, dtype=np.int64)
    remap[reps] = np.arange(len(reps))
    return remap[rep]


def neighbor_candidates(g: SparseGraph, hard: np.ndarray, K: int) -> sp.csr_matrix:
    """Candidate prototypes per node: own cluster plus neighbors' clusters."""
    rows = g.row_of_entry()
    src = np.concatenate([np.arange(g.n, dtype=np.int64), rows])
    tgt = np.concatenate([hard, hard[g.col_indices]])
    pattern = sp.coo_matrix(
        (np.ones(len(src)), (src, tgt)), shape=(g.n, K)
    ).tocsr()
    pattern.sum_duplicates()
    pattern.sort_indices()
    pattern.data[:] = 1.0
    return pattern


# ---------------------------------------------------------------------------
# hierarchy build


def _cluster_level(
    g: SparseGraph,
    Z: np.ndarray,
    K: int,
    tau: float,
    seed: int,
    method: str,
) -> LevelAssignment:
    if method == "kmeans":
        protos = spherical_refine(Z, kmeanspp_seed(Z, K, seed))
        soft = soft_assign(Z, protos, tau)
        hard = harden(soft)
        # drop clusters that win no node; re-normalize over the survivors
        while True:
            counts = np.bincount(hard, minlength=protos.shape[0])
            if counts.min() > 0 or protos.shape[0] == 1:
                break
            protos = protos[counts > 0]
            soft = soft_assign(Z, protos, tau)
            hard = harden(soft)
        return LevelAssignment(soft=soft, hard=hard, prototypes=protos, tau=tau)
    if method == "matching":
        base = matching_clusters(g, seed)
        K_eff = int(base.max()) + 1 if base.size else 0
        protos = np.zeros((K_eff, Z.shape[1]), dtype=np.float64)
        counts = np.bincount(base, minlength=K_eff).astype(np.float64)
        np.add.at(protos, base, Z)
        protos /= counts[:, None]
        while True:
            cand = neighbor_candidates(g, base, K_eff)
            soft = soft_assign_sparse(Z, protos, tau, cand)
            hard = _harden_sparse_fast(soft)
            alive = np.bincount(hard, minlength=K_eff) > 0
            if alive.all() or K_eff == 1:
                break
            # drop unclaimed clusters; renumber survivors and retry
            remap = np.cumsum(alive) - 1
            base = remap[hard]
            K_eff = int(alive.sum())
            protos = protos[alive]
        return LevelAssignment(
            soft=soft, hard=hard, prototypes=protos, tau=tau, candidates=cand
        )
    raise HierarchyError(f"unknown coarsen method {method!r}")


def encoder_for_level(
    encoders: Union[EncoderParams, Sequence[EncoderParams]], level: int
) -> EncoderParams:
    if isinstance(encoders, EncoderParams):
        return encoders
    return encoders[level] if level < len(encoders) else encoders[-1]


def build_hierarchy(
    g: SparseGraph,
    X: np.ndarray,
    encoders: Union[EncoderParams, Sequence[EncoderParams]],
    ratio: float,
    threshold: int,
    tau: float = 1.0,
    seed: int = 0,
    coarsen_to_one: bool = False,
    similarity_mode: str = "softmax",
    method: str = "kmeans",
    chain: str = "raw",
) -> HaarTree:
    """Run the coarsening loop until the node count drops to the stop size.

    ``chain`` selects what flows upward: ``raw`` aggregates the level features
    themselves (node tasks); ``encoded`` aggregates the encoder scores so each
    level's representation is a nonlinear transform of the previous one
    (graph tasks).
    """
    if g.n == 0:
        raise HierarchyError("empty graph")
    if not 0.0 < ratio < 1.0:
        raise HierarchyError("ratio must be in (0, 1)")
    if threshold < 1:
        raise HierarchyError("threshold must be >= 1")
    stop = 1 if coarsen_to_one else threshold
    levels: List[HierarchyLevel] = []
    cur_g, cur_x = g, np.asarray(X, dtype=np.float64)
    level = 0
    while True:
        if cur_g.n <= stop:
            levels.append(HierarchyLevel(cur_g, cur_x))
            break
        enc = encoder_for_level(encoders, level)
        Z, _ = encoder_forward(cur_g, cur_x, enc, similarity_mode)
        scores = normalize_rows(Z)
        K = max(1, int(np.floor(cur_g.n * ratio)))
        assign = _cluster_level(cur_g, scores, K, tau, seed + 7919 * level, method)
        levels.append(HierarchyLevel(cur_g, cur_x, Z, assign))
        carrier = cur_x if chain == "raw" else Z
        cur_x = aggregate_features(carrier, assign.soft)
        cur_g = aggregate_adjacency(cur_g, assign.hard, assign.num_clusters)
        level += 1
    return HaarTree(levels, ratio, threshold, coarsen_to_one)
