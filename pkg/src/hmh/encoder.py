"""Heterophily-aware signed encoder.

Per layer: combine a learnable feature affinity with a topology-only
two-hop Jaccard similarity, normalize over each neighborhood, map to signed
edge weights in [-1, 1], and propagate.  Similarities are recomputed from the
current embeddings at every layer, which is what breaks the two-step sign
oscillation of fixed-sign propagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .graph import SparseGraph, two_hop_matrix, two_hop_set
from .segments import segment_softmax

SIMILARITY_MODES = ("softmax", "sigmoid")


class EncoderError(ValueError):
    pass


def logistic(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically safe logistic sigmoid, clamped into the open interval.

    Saturated inputs would otherwise underflow to exactly 0 or round to 1;
    similarity values are contractually in (0, 1).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(np.float64).tiny
    np.clip(out, tiny, 1.0 - np.finfo(np.float64).epsneg, out=out)
    return out if out.ndim else float(out)


@dataclass
class EncoderLayer:
    w_att: np.ndarray  # (2 * d_in,)
    W: np.ndarray      # (d_in, d_out)

    def __post_init__(self):
        self.w_att = np.asarray(self.w_att, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.w_att.shape != (2 * self.W.shape[0],):
            raise EncoderError(
                f"w_att has length {self.w_att.shape[0]}, expected {2 * self.W.shape[0]}"
            )


@dataclass
class EncoderParams:
    layers: List[EncoderLayer]
    activation: str = "relu"  # "relu" or "identity"

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise EncoderError("encoder layer dimensions do not chain")
        if self.activation not in ("relu", "identity"):
            raise EncoderError(f"unknown activation {self.activation!r}")


def init_encoder_params(
    rng: np.random.Generator,
    dims: List[int],
    activation: str = "relu",
    weight_init: str = "he",
) -> EncoderParams:
    """Initialize a layer stack; ``dims = [d_in, d_h1, ..., d_out]``.

    ``he`` scales weights by fan-in, keeping activation magnitudes stable
    through deep signed-propagation stacks.  ``identity`` starts every square
    layer at I plus small noise so propagation is coordinate-preserving at
    init; useful when feature slots carry aligned symbolic content (keys and
    queries) that random mixing would scramble.
    """
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        if weight_init == "identity" and d_in == d_out:
            w = np.eye(d_in) + rng.normal(0.0, 0.02, size=(d_in, d_out))
        elif weight_init == "identity":
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
            w[: min(d_in, d_out), : min(d_in, d_out)] += np.eye(min(d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        layers.append(
            EncoderLayer(w_att=rng.normal(0.0, 0.5, size=2 * d_in), W=w)
        )
    return EncoderParams(layers, activation)


def feature_affinity(h_i: np.ndarray, h_j: np.ndarray, w_att: np.ndarray) -> float:
    """Logistic of w_att . [h_i || h_j]; not symmetric in (i, j) in general."""
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    w_att = np.asarray(w_att, dtype=np.float64)
    if w_att.shape[0] != h_i.shape[0] + h_j.shape[0]:
        raise EncoderError("w_att length must equal len(h_i) + len(h_j)")
    return float(logistic(w_att[: h_i.shape[0]] @ h_i + w_att[h_i.shape[0]:] @ h_j))


def structural_similarity(g: SparseGraph, i: int, j: int) -> float:
    """Jaccard index of the two-hop sets of i and j; 0 on empty union."""
    a = two_hop_set(g, i)
    b = two_hop_set(g, j)
    union = len(np.union1d(a, b))
    if union == 0:
        return 0.0
    inter = len(np.intersect1d(a, b))
    return inter / union


def edge_structural_similarities(g: SparseGraph) -> np.ndarray:
    """Two-hop Jaccard for every directed CSR entry; cached per topology."""
    key = "edge_struct_sim"
    if key in g._cache:
        return g._cache[key]
    m = g.num_entries
    out = np.zeros(m, dtype=np.float64)
    if m:
        b = two_hop_matrix(g)
        sizes = np.asarray(b.sum(axis=1)).ravel()
        src = g.row_of_entry()
        dst = g.col_indices
        chunk = 200_000
        for lo in range(0, m, chunk):
            hi = min(lo + chunk, m)
            bi = b[src[lo:hi]]
            bj = b[dst[lo:hi]]
            inter = np.asarray(bi.multiply(bj).sum(axis=1)).ravel()
            union = sizes[src[lo:hi]] + sizes[dst[lo:hi]] - inter
            nz = union > 0
            out[lo:hi][nz] = inter[nz] / union[nz]
    g._cache[key] = out
    return out


@dataclass
class EdgeSimilarity:
    """Per-edge normalized similarity sharing the host graph's CSR layout."""

    graph: SparseGraph
    values: np.ndarray
    mode: str

    def __post_init__(self):
        if self.values.shape != (self.graph.num_entries,):
            raise EncoderError("similarity support must equal the edge set")


def attention_scores(g: SparseGraph, H: np.ndarray, w_att: np.ndarray) -> np.ndarray:
    """S_att per directed entry: logistic(w_a . h_i + w_b . h_j)."""
    d = H.shape[1]
    if w_att.shape[0] != 2 * d:
        raise EncoderError("w_att length must be 2 * feature dim")
    a_part = H @ w_att[:d]
    b_part = H @ w_att[d:]
    raw = a_part[g.row_of_entry()] + b_part[g.col_indices]
    return logistic(raw)


def combined_similarity(
    g: SparseGraph, H: np.ndarray, layer: EncoderLayer, mode: str = "softmax"
) -> EdgeSimilarity:
    """Normalized per-neighborhood similarity from feature + structure scores.

    softmax mode normalizes raw scores over each node's neighbor set (rows sum
    to 1); sigmoid mode squashes each edge score independently into (0, 1).
    """
    if mode not in SIMILARITY_MODES:
        raise EncoderError(f"unknown similarity mode {mode!r}")
    if H.shape[0] != g.n:
        raise EncoderError("feature row count must match graph")
    if not np.all(np.isfinite(H)):
        raise EncoderError("non-finite feature")
    raw = attention_scores(g, H, layer.w_att) + edge_structural_similarities(g)
    if mode == "softmax":
        values = segment_softmax(raw, g.row_offsets)
    else:
        values = logistic(raw)
    return EdgeSimilarity(g, values, mode)


def adaptive_adjacency(sim: EdgeSimilarity, g: SparseGraph) -> SparseGraph:
    """Signed adjacency: weight per edge = 2 * similarity - 1 on the edge set."""
    if sim.graph is not g and sim.values.shape[0] != g.num_entries:
        raise EncoderError("similarity support must equal the graph's edge set")
    return SparseGraph(
        n=g.n,
        row_offsets=g.row_offsets,
        col_indices=g.col_indices,
        weights=2.0 * sim.values - 1.0,
    )


def encoder_forward(
    g: SparseGraph,
    X: np.ndarray,
    params: EncoderParams,
    mode: str = "softmax",
) -> Tuple[np.ndarray, List[SparseGraph]]:
    """Run all encoder layers; returns final scores and every signed adjacency.

    Each layer recomputes the similarity matrix from the *current* embeddings,
    rebuilds the signed adjacency, propagates, and applies the activation.
    """
    Z = np.asarray(X, dtype=np.float64)
    adjacencies: List[SparseGraph] = []
    for k, layer in enumerate(params.layers):
        if Z.shape[1] != layer.W.shape[0]:
            raise EncoderError(
                f"layer {k}: input dim {Z.shape[1]} != expected {layer.W.shape[0]}"
            )
        sim = combined_similarity(g, Z, layer, mode)
        a_adp = adaptive_adjacency(sim, g)
        adjacencies.append(a_adp)
        Z = a_adp.to_scipy() @ Z @ layer.W
        if params.activation == "relu":
            Z = np.maximum(Z, 0.0)
        if not np.all(np.isfinite(Z)):
            raise EncoderError(f"non-finite embedding after encoder layer {k}")
    return Z, adjacencies
