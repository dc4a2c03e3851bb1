"""Synthetic generators and the pathology/scaling benchmark suites.

Generators: hub-spoke instances with margin-constructed features, the
key-matching tree benchmark for long-range information flow, and stochastic
block models.  Suites: hub domination (degree-stratified accuracy),
oversmoothing (Dirichlet energy traces), oversquashing (tree matching),
basis locality (hop energy), and near-linear scaling (ms per million edges).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .basis import FilterGains, assemble_basis, filter_features, hop_energy_profile
from .data import Dataset, GraphDataset, LabelVector, stratified_split
from .graph import GraphError, SparseGraph, build_graph
from .metrics import (
    degree_stratified_accuracy,
    dirichlet_energy,
    separation_ratio,
)

# re-exported here because the benchmark module owns the metric surface
__all__ = [
    "HubSpokeConfig",
    "TreeMatchConfig",
    "gen_hub_spoke",
    "gen_tree_neighborsmatch",
    "gen_sbm",
    "dirichlet_energy",
    "separation_ratio",
    "degree_stratified_accuracy",
    "margin_class_means",
    "hub_contrast_distances",
    "filtered_separation_ratio",
    "separation_bound",
    "scaling_benchmark",
]


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# hub-spoke generator


@dataclass
class HubSpokeConfig:
    a: int = 10
    b: int = 10
    M: int = 200
    kappa: float = 0.8
    d: int = 8
    p_intra: float = 0.3
    p_spoke_hub: float = 0.05
    noise: float = 0.05
    seed: int = 0
    train_frac: float = 0.6
    val_frac: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise BenchError("kappa must be in (0, 1)")
        if self.M < 5 * (self.a + self.b):
            raise BenchError("hub must satisfy M >= 5 (a + b)")
        if self.d < 3:
            raise BenchError("margin construction infeasible for d < 3")


def margin_class_means(kappa: float, d: int) -> np.ndarray:
    """Unit class means with spoke-hub inner product exactly -kappa.

    The hub mean is e1 and the two spoke means sit symmetrically at angle
    arccos(-kappa) from it; their mutual inner product 2 kappa^2 - 1 is the
    smallest achievable given both spoke-hub margins (and <= -kappa exactly
    when kappa <= 1/2, the feasibility limit for three mutual margins).
    """
    if d < 3:
        raise BenchError("need d >= 3")
    s = np.sqrt(1.0 - kappa * kappa)
    means = np.zeros((3, d))
    means[2, 0] = 1.0                       # hub
    means[0, 0], means[0, 1] = -kappa, s    # spoke A
    means[1, 0], means[1, 1] = -kappa, -s   # spoke B
    return means


def _pair_edges(rng, group_u, group_v, p, same=False):
    """Bernoulli edges between two node-id arrays (upper triangle if same)."""
    if p <= 0:
        return np.empty((0, 2), dtype=np.int64)
    if same:
        iu, iv = np.triu_indices(len(group_u), k=1)
        cand = np.stack([group_u[iu], group_u[iv]], axis=1)
    else:
        cand = np.stack(
            [np.repeat(group_u, len(group_v)), np.tile(group_v, len(group_u))],
            axis=1,
        )
    keep = rng.random(len(cand)) < p
    return cand[keep]


def gen_hub_spoke(cfg: HubSpokeConfig) -> Dataset:
    """Two small spokes attached to a dominant hub; labels = group id.

    Group ids: 0 = spoke A, 1 = spoke B, 2 = hub.  There are never A-B edges.
    Features are the unit margin means plus Gaussian noise, renormalized.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.a + cfg.b + cfg.M
    ids_a = np.arange(cfg.a)
    ids_b = np.arange(cfg.a, cfg.a + cfg.b)
    ids_h = np.arange(cfg.a + cfg.b, n)
    chunks = [
        _pair_edges(rng, ids_a, ids_a, cfg.p_intra, same=True),
        _pair_edges(rng, ids_b, ids_b, cfg.p_intra, same=True),
        _pair_edges(rng, ids_h, ids_h, cfg.p_intra, same=True),
        _pair_edges(rng, ids_a, ids_h, cfg.p_spoke_hub),
        _pair_edges(rng, ids_b, ids_h, cfg.p_spoke_hub),
    ]
    edges = np.concatenate([c for c in chunks if len(c)], axis=0)
    g = build_graph(edges, n)
    labels = np.zeros(n, dtype=np.int64)
    labels[ids_b] = 1
    labels[ids_h] = 2
    means = margin_class_means(cfg.kappa, cfg.d)
    x = means[labels]
    if cfg.noise > 0:
        x = x + cfg.noise * rng.normal(size=(n, cfg.d))
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    train, val, test = stratified_split(labels, cfg.seed + 1, cfg.train_frac, cfg.val_frac)
    return Dataset(g, x, LabelVector(labels, 3), train, val, test)


# ---------------------------------------------------------------------------
# separation-bound metric check


def hub_contrast_distances(
    mu_a: np.ndarray,
    mu_b: np.ndarray,
    mu_h: np.ndarray,
    a: int,
    b: int,
    M: int,
    lambda_wav: float = 1.5,
) -> Tuple[float, float]:
    """Post-filter centroid distances for the three-group contrast setup.

    The amplified cluster-contrast channels carry the spoke-spoke gap at
    weight sqrt(M / (a + b)) while the spoke-hub gap is damped to
    sqrt(a / M); both scale linearly in the wavelet gain, so the bound on
    their ratio is gain-free.
    """
    d_ab = lambda_wav * np.sqrt(M / (a + b)) * float(np.linalg.norm(mu_a - mu_b))
    d_ah = lambda_wav * np.sqrt(a / M) * float(np.linalg.norm(mu_a - mu_h))
    return d_ab, d_ah


def separation_bound(M: int) -> float:
    """sqrt(M) (1 - 2 / sqrt(M)); the hub-size floor on the distance ratio."""
    return float(np.sqrt(M) * (1.0 - 2.0 / np.sqrt(M)))


def filtered_separation_ratio(
    embeddings: np.ndarray,
    groups: np.ndarray,
    lambda_wav: float = 1.5,
) -> float:
    """Distance ratio Delta_AB / Delta_AH' after the contrast filter."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    groups = np.asarray(groups)
    sizes = [int((groups == gid).sum()) for gid in (0, 1, 2)]
    if min(sizes) == 0:
        raise BenchError("all three groups must be non-empty")
    mu = [embeddings[groups == gid].mean(axis=0) for gid in (0, 1, 2)]
    d_ab, d_ah = hub_contrast_distances(
        mu[0], mu[1], mu[2], sizes[0], sizes[1], sizes[2], lambda_wav
    )
    if d_ah == 0.0:
        return float("inf")
    return d_ab / d_ah


# ---------------------------------------------------------------------------
# tree key-matching generator


@dataclass
class TreeMatchConfig:
    depth: int = 4
    num_classes: int = 4
    samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise BenchError("depth must be >= 2")
        if self.num_classes > 2 ** self.depth:
            raise BenchError("num_classes cannot exceed the leaf count")


def gen_tree_neighborsmatch(cfg: TreeMatchConfig) -> List[GraphDataset]:
    """Complete binary trees whose root must be matched to one leaf.

    Every leaf carries (class one-hot || key one-hot); the root carries the
    query key of exactly one leaf, and the graph label is that leaf's class.
    Labels cycle so classes are balanced across samples.
    """
    rng = np.random.default_rng(cfg.seed)
    depth = cfg.depth
    n = 2 ** (depth + 1) - 1
    leaves = np.arange(2 ** depth - 1, n)
    n_leaves = len(leaves)
    edges = np.array([[(i - 1) // 2, i] for i in range(1, n)], dtype=np.int64)
    g_proto = build_graph(edges, n)
    # features: [class one-hot | key one-hot | node-type one-hot]; the type
    # flags (root / internal / leaf) are the benchmark family's standard
    # markers and give the bias-free propagation rule a constant reference
    d = cfg.num_classes + n_leaves + 3
    type_col = cfg.num_classes + n_leaves
    # fixed near-equal class composition: leaf class counts carry no label
    # information, so only genuine key matching can beat chance
    base_comp = np.arange(n_leaves) % cfg.num_classes
    # keys are fixed position markers: the difficulty under test is the
    # root-to-leaf routing distance, not per-sample key re-shuffling
    keys = np.arange(n_leaves)
    out: List[GraphDataset] = []
    for s in range(cfg.samples):
        label = s % cfg.num_classes
        classes = base_comp[rng.permutation(n_leaves)]
        candidates = np.flatnonzero(classes == label)
        target = int(candidates[rng.integers(len(candidates))])
        x = np.zeros((n, d))
        x[leaves, classes] = 1.0
        x[leaves, cfg.num_classes + keys] = 1.0
        x[0, cfg.num_classes + keys[target]] = 1.0  # query at the root
        x[0, type_col] = 1.0
        x[1:leaves[0], type_col + 1] = 1.0
        x[leaves, type_col + 2] = 1.0
        g = SparseGraph(g_proto.n, g_proto.row_offsets, g_proto.col_indices)
        out.append(GraphDataset(g, x, int(label), cfg.num_classes))
    return out


# ---------------------------------------------------------------------------
# stochastic block model


def gen_sbm(
    block_sizes: Sequence[int],
    p_in: float,
    p_out: float,
    d: int = 8,
    seed: int = 0,
    feature_scale: float = 1.0,
    noise: float = 1.0,
) -> Dataset:
    """Standard SBM with Gaussian class-mean features; block id = label.

    Edge sampling draws a binomial count per block pair and then uniform
    endpoints, so generation is near-linear in the edge count.
    """
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise BenchError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    sizes = np.asarray(block_sizes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    nb = len(sizes)
    chunks = []
    for i in range(nb):
        for j in range(i, nb):
            p = p_in if i == j else p_out
            if p <= 0:
                continue
            pairs = (
                sizes[i] * (sizes[i] - 1) // 2 if i == j else sizes[i] * sizes[j]
            )
            count = rng.binomial(pairs, p)
            if count == 0:
                continue
            # uniform endpoint sampling (collisions removed by build_graph)
            u = rng.integers(offsets[i], offsets[i + 1], size=count)
            v = rng.integers(offsets[j], offsets[j + 1], size=count)
            keep = u != v
            chunks.append(np.stack([u[keep], v[keep]], axis=1))
    edges = (
        np.concatenate(chunks, axis=0)
        if chunks
        else np.empty((0, 2), dtype=np.int64)
    )
    g = build_graph(edges, n)
    labels = np.repeat(np.arange(nb), sizes)
    means = rng.normal(scale=feature_scale, size=(nb, d))
    x = means[labels] + noise * rng.normal(size=(n, d))
    train, val, test = stratified_split(labels, seed + 1)
    return Dataset(g, x, LabelVector(labels, nb), train, val, test)


def sbm_probability_for_edges(
    block_sizes: Sequence[int], target_edges: int, ratio_in_out: float = 4.0
) -> Tuple[float, float]:
    """p_in, p_out giving the requested expected undirected edge count."""
    sizes = np.asarray(block_sizes, dtype=np.float64)
    pairs_in = float(np.sum(sizes * (sizes - 1) / 2))
    total = float(sizes.sum())
    pairs_out = (total * total - float(np.sum(sizes * sizes))) / 2.0
    # target = p_in * pairs_in + p_out * pairs_out with p_in = r * p_out
    p_out = target_edges / (ratio_in_out * pairs_in + pairs_out)
    return min(ratio_in_out * p_out, 1.0), min(p_out, 1.0)


# ---------------------------------------------------------------------------
# energy traces (oversmoothing suite)


def gcn_energy_trace(
    g: SparseGraph,
    X: np.ndarray,
    depth: int,
    seed: int = 0,
    hidden: Optional[int] = None,
    activation: str = "relu",
) -> List[float]:
    """Dirichlet energy of sigma(P H W) embeddings after each layer."""
    from .model import gcn_propagation

    rng = np.random.default_rng(seed)
    p = gcn_propagation(g)
    h = np.asarray(X, dtype=np.float64)
    d = h.shape[1] if hidden is None else hidden
    energies = []
    for _ in range(depth):
        w = rng.normal(0.0, np.sqrt(2.0 / (h.shape[1] + d)), size=(h.shape[1], d))
        h = p @ h @ w
        if activation == "relu":
            h = np.maximum(h, 0.0)
        energies.append(dirichlet_energy(g, h))
    return energies


def hmh_fusion_energy_trace(
    dataset: Dataset, config=None, seed: int = 0
) -> List[float]:
    """Dirichlet energy of the fused embedding as levels are added.

    Entry l is the energy of the partial fusion using levels 0..l with
    freshly initialized parameters; the additive skip keeps the full fusion's
    energy from collapsing.
    """
    from .hierarchy import build_hierarchy, level_size_schedule
    from .model import init_hmh_params

    g, x = dataset.graph, dataset.features
    schedule = level_size_schedule(g.n, 0.5, 2)
    params = init_hmh_params(
        seed, x.shape[1], dataset.labels.num_classes,
        n_levels=len(schedule), task="node", d_hidden=32, enc_hidden=16,
    )
    tree = build_hierarchy(
        g, x, params.encoders, ratio=0.5, threshold=2, seed=seed
    )
    bases = assemble_basis(tree)
    anc = tree.ancestors()
    fused = None
    energies = []
    for l, level in enumerate(tree.levels):
        sc, inter, intra = params.realized_gains(min(l, params.num_levels() - 1))
        gains = FilterGains.tied(bases[l], sc, inter, intra)
        h = filter_features(bases[l], gains, level.features)
        s = h @ params.level_proj[min(l, len(params.level_proj) - 1)]
        contrib = s if l == 0 else s[anc[l]]
        fused = contrib if fused is None else fused + contrib
        energies.append(dirichlet_energy(g, fused))
    return energies


# ---------------------------------------------------------------------------
# scaling harness


def scaling_benchmark(
    edge_counts: Sequence[int],
    make_epoch_fn: Callable[[int], Tuple[Callable[[], None], int]],
    repeats: int = 3,
) -> List[dict]:
    """Median wall-clock per epoch, normalized to ms per million edges.

    ``make_epoch_fn(target_edges)`` returns (epoch callable, actual edge
    count).  One warm-up call is discarded; the median of ``repeats`` timed
    calls is reported.
    """
    if list(edge_counts) != sorted(edge_counts):
        raise BenchError("edge counts must be ascending")
    rows = []
    for m_target in edge_counts:
        epoch, m_actual = make_epoch_fn(int(m_target))
        epoch()  # warm-up
        times = []
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter()
            epoch()
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        rows.append(
            {
                "target_edges": int(m_target),
                "edges": int(m_actual),
                "seconds_per_epoch": med,
                "ms_per_medge": 1000.0 * med / (m_actual / 1e6),
            }
        )
    return rows
