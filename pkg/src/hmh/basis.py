"""Sparse orthonormal basis per hierarchy level, and diagonal filtering.

Each level's basis U has one strictly positive scaling column (the uniform
mean direction), block-constant cluster-contrast wavelets inherited from the
coarser levels, and strictly local intra-cluster wavelets.  Columns are built
from mass-weighted contrast chains: the chain over weights (m_1..m_K) is
orthonormal under the weighted inner product, so lifting a column by copying
each cluster's value onto its members preserves orthonormality exactly.  The
recursion keeps total nonzeros near n * depth, which is what makes basis
construction and filtering near-linear on sparse graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .graph import SparseGraph
from .hierarchy import HaarTree

KIND_SCALING = 0
KIND_INTER = 1
KIND_INTRA = 2


class BasisError(ValueError):
    pass


def helmert_chain(masses: Sequence[float] | np.ndarray) -> np.ndarray:
    """m-1 contrast vectors over m slots with positive masses.

    Column r (1-indexed) takes value +sqrt(beta_r / (alpha_r (alpha_r+beta_r)))
    at slot r and -sqrt(alpha_r / (beta_r (alpha_r+beta_r))) at slots > r,
    where alpha_r = masses[r-1] and beta_r is the tail mass.  The columns are
    orthonormal under the mass-weighted inner product (Euclidean for unit
    masses) and orthogonal to the constant vector under the same weighting.
    """
    masses = np.asarray(masses, dtype=np.float64)
    if masses.ndim != 1 or masses.size < 2:
        raise BasisError("need at least 2 masses")
    if np.any(masses <= 0):
        raise BasisError("masses must be positive")
    m = masses.size
    tail = np.cumsum(masses[::-1])[::-1]  # tail[r] = sum(masses[r:])
    out = np.zeros((m, m - 1), dtype=np.float64)
    for r in range(m - 1):
        alpha = masses[r]
        beta = tail[r + 1]
        total = alpha + beta
        out[r, r] = np.sqrt(beta / (alpha * total))
        out[r + 1:, r] = -np.sqrt(alpha / (beta * total))
    return out


@dataclass
class HaarBasis:
    """Orthonormal sparse basis for one level; columns in CSC order
    [scaling | inherited cluster contrasts | local intra wavelets]."""

    level: int
    n: int
    U: sp.csc_matrix
    column_kind: np.ndarray          # (n,) KIND_* per column
    intra_owner: np.ndarray          # (n,) owning cluster id for intra, else -1

    @property
    def nnz(self) -> int:
        return self.U.nnz

    def columns_of_kind(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.column_kind == kind)

    def kind_counts(self) -> dict:
        return {
            "scaling": int((self.column_kind == KIND_SCALING).sum()),
            "inter": int((self.column_kind == KIND_INTER).sum()),
            "intra": int((self.column_kind == KIND_INTRA).sum()),
        }

    def gram_residual(self) -> float:
        """max |U^T U - I|; the orthonormality defect."""
        gram = (self.U.T @ self.U).toarray()
        return float(np.max(np.abs(gram - np.eye(self.n))))

    def dense(self) -> np.ndarray:
        return self.U.toarray()


def _chain_triplets(masses: np.ndarray, row_ids: np.ndarray, col_base: int,
                    rows: list, cols: list, data: list) -> None:
    """Append COO triplets for the contrast chain embedded at ``row_ids``."""
    dense = helmert_chain(masses)
    m = masses.size
    for r in range(m - 1):
        support = row_ids[r:]
        rows.append(support)
        cols.append(np.full(support.size, col_base + r, dtype=np.int64))
        data.append(dense[r:, r])


def _mass_basis(tree: HaarTree, t: int, masses: np.ndarray):
    """Basis of R^{n_t} orthonormal under the given node masses.

    Returns (U csc, kinds, owners).  Kinds are relative to level t: lifted
    coarse detail becomes "inter"; fresh within-cluster chains are "intra".
    """
    level = tree.levels[t]
    n = level.n
    if level.assignment is None:
        scaling = sp.csc_matrix(
            (np.full(n, 1.0 / np.sqrt(masses.sum())),
             (np.arange(n), np.zeros(n, dtype=np.int64))),
            shape=(n, 1),
        )
        if n == 1:
            return scaling, np.array([KIND_SCALING], dtype=np.int8), np.array([-1])
        rows, cols, data = [], [], []
        _chain_triplets(masses, np.arange(n), 0, rows, cols, data)
        chain = sp.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n - 1),
        )
        U = sp.hstack([scaling, chain], format="csc")
        kinds = np.concatenate(
            [[KIND_SCALING], np.full(n - 1, KIND_INTER, dtype=np.int8)]
        ).astype(np.int8)
        owners = np.full(n, -1, dtype=np.int64)
        return U, kinds, owners

    hard = level.assignment.hard
    K = level.assignment.num_clusters
    cluster_masses = np.bincount(hard, weights=masses, minlength=K)
    coarse_u, coarse_kinds, _ = _mass_basis(tree, t + 1, cluster_masses)
    lifted = coarse_u.tocsr()[hard].tocsc()  # copy each cluster value to members
    lifted_kinds = np.where(
        coarse_kinds == KIND_SCALING, KIND_SCALING, KIND_INTER
    ).astype(np.int8)

    rows, cols, data = [], [], []
    owners_intra = []
    next_col = 0
    order = np.argsort(hard, kind="stable")
    bounds = np.searchsorted(hard[order], np.arange(K + 1))
    for q in range(K):
        members = np.sort(order[bounds[q]:bounds[q + 1]])
        if members.size >= 2:
            _chain_triplets(masses[members], members, next_col, rows, cols, data)
            owners_intra.extend([q] * (members.size - 1))
            next_col += members.size - 1
    if next_col:
        intra = sp.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, next_col),
        )
        U = sp.hstack([lifted, intra], format="csc")
    else:
        U = lifted
    kinds = np.concatenate(
        [lifted_kinds, np.full(len(owners_intra), KIND_INTRA, dtype=np.int8)]
    ).astype(np.int8)
    owners = np.concatenate(
        [np.full(lifted.shape[1], -1, dtype=np.int64),
         np.asarray(owners_intra, dtype=np.int64)]
    )
    return U, kinds, owners


def assemble_basis(tree: HaarTree) -> List[HaarBasis]:
    """One orthonormal basis per level, coarsest built first and lifted down."""
    bases = []
    for t in range(tree.num_levels):
        n = tree.levels[t].n
        U, kinds, owners = _mass_basis(tree, t, np.ones(n, dtype=np.float64))
        if U.shape != (n, n):
            raise BasisError(f"level {t}: basis is {U.shape}, expected square")
        U.sort_indices()
        bases.append(HaarBasis(level=t, n=n, U=U, column_kind=kinds,
                               intra_owner=owners))
    return bases


# ---------------------------------------------------------------------------
# Single-lift building blocks (also used directly by tests and diagnostics)


def coarsest_basis(K: int) -> HaarBasis:
    """Uniform scaling vector plus the unit-mass contrast chain."""
    if K < 1:
        raise BasisError("K must be >= 1")
    scaling = np.full((K, 1), 1.0 / np.sqrt(K))
    if K == 1:
        U = sp.csc_matrix(scaling)
        return HaarBasis(0, 1, U, np.array([KIND_SCALING], dtype=np.int8),
                         np.array([-1]))
    chain = helmert_chain(np.ones(K))
    U = sp.csc_matrix(np.hstack([scaling, chain]))
    kinds = np.concatenate([[KIND_SCALING], np.full(K - 1, KIND_INTER)]).astype(np.int8)
    return HaarBasis(0, K, U, kinds, np.full(K, -1, dtype=np.int64))


def lift_scaling(u_next: np.ndarray, hard: np.ndarray) -> np.ndarray:
    """Copy each parent's scaling value to its members, then renormalize."""
    u_next = np.asarray(u_next, dtype=np.float64)
    fine = u_next[np.asarray(hard, dtype=np.int64)]
    norm = np.linalg.norm(fine)
    if norm == 0:
        raise BasisError("lifted scaling vector is zero")
    return fine / norm


def inter_wavelets(hard: np.ndarray, K: int) -> np.ndarray:
    """K-1 block-constant cluster contrasts, orthonormal in the fine space.

    Uses cluster sizes as chain masses so the expanded columns stay unit norm
    and mutually orthogonal under unequal cluster sizes.
    """
    hard = np.asarray(hard, dtype=np.int64)
    if K < 2:
        raise BasisError("need at least 2 clusters")
    sizes = np.bincount(hard, minlength=K).astype(np.float64)
    if np.any(sizes == 0):
        raise BasisError("empty cluster")
    chain = helmert_chain(sizes)  # values per cluster slot
    return chain[hard]            # block-constant expansion


def intra_wavelets(members: np.ndarray, n: int) -> np.ndarray:
    """n_k - 1 local contrasts for one cluster, zero outside its members.

    ``members`` is the cluster's node list; columns use ascending node order
    and unit (hardened) masses.
    """
    members = np.sort(np.asarray(members, dtype=np.int64))
    nk = members.size
    out = np.zeros((n, max(nk - 1, 0)), dtype=np.float64)
    if nk >= 2:
        out[members] = helmert_chain(np.ones(nk))
    return out


# ---------------------------------------------------------------------------
# Filtering


@dataclass
class FilterGains:
    """Diagonal gains: one scalar for the scaling column, one gain per
    wavelet column (usually tied per kind).  Trained gains keep
    lambda_sc in (0, 1) and wavelet gains >= 1 via their parameterization."""

    lambda_sc: float
    lambda_wav: np.ndarray

    @staticmethod
    def tied(basis: HaarBasis, lambda_sc: float, lambda_inter: float,
             lambda_intra: float) -> "FilterGains":
        kinds = basis.column_kind
        wav = np.where(kinds[kinds != KIND_SCALING] == KIND_INTER,
                       lambda_inter, lambda_intra).astype(np.float64)
        return FilterGains(lambda_sc=float(lambda_sc), lambda_wav=wav)

    @staticmethod
    def identity(basis: HaarBasis) -> "FilterGains":
        return FilterGains(1.0, np.ones(basis.n - 1, dtype=np.float64))

    def column_vector(self, basis: HaarBasis) -> np.ndarray:
        lam = np.empty(basis.n, dtype=np.float64)
        sc = basis.column_kind == KIND_SCALING
        lam[sc] = self.lambda_sc
        lam[~sc] = self.lambda_wav
        return lam

    def check_bounds(self) -> bool:
        return 0.0 < self.lambda_sc < 1.0 and bool(np.all(self.lambda_wav >= 1.0))


def filter_features(
    basis: HaarBasis,
    gains: Union[FilterGains, np.ndarray],
    X: np.ndarray,
) -> np.ndarray:
    """Analysis, per-column gain, synthesis: U diag(lam) U^T X.

    Two sparse passes; the dense projector U U^T is never formed.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != basis.n:
        raise BasisError(f"X has {X.shape[0]} rows, basis is {basis.n}")
    lam = gains.column_vector(basis) if isinstance(gains, FilterGains) else np.asarray(gains)
    coef = basis.U.T @ X
    coef *= lam[:, None] if X.ndim == 2 else lam
    return basis.U @ coef


def hop_energy_profile(
    g: SparseGraph, column: np.ndarray, max_hops: int = 4
) -> np.ndarray:
    """Energy fraction per hop shell around the column's strongest entry.

    Returns max_hops + 2 fractions: shells 0..max_hops plus a remainder
    bucket for everything farther (or unreachable); they sum to 1.
    """
    col = np.asarray(column, dtype=np.float64).ravel()
    total = float(col @ col)
    if total <= 0:
        raise BasisError("zero column")
    energy = col * col / total
    center = int(np.argmax(np.abs(col)))
    dist = np.full(g.n, -1, dtype=np.int64)
    dist[center] = 0
    frontier = np.array([center], dtype=np.int64)
    for h in range(1, max_hops + 1):
        nxt = []
        for u in frontier:
            nbr = g.neighbors(u)
            fresh = nbr[dist[nbr] < 0]
            dist[fresh] = h
            nxt.append(fresh)
        frontier = np.concatenate(nxt) if nxt else np.empty(0, dtype=np.int64)
        if frontier.size == 0:
            break
    out = np.zeros(max_hops + 2, dtype=np.float64)
    for h in range(max_hops + 1):
        out[h] = energy[dist == h].sum()
    out[max_hops + 1] = energy[dist < 0].sum() + energy[dist > max_hops].sum()
    return out
