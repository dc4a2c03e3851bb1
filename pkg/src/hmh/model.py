"""End-to-end models: the hierarchical spectral network and its baselines.

The hierarchical forward pass treats the tree's structure (hard parents,
prototypes, basis columns) as constants between refreshes while recomputing
everything differentiable: per-level encoder scores, soft assignments, the
aggregated feature chain, diagonal filtering, and the fused readout.

Baselines: GCN (self-loop normalized propagation), label-signed message
passing (SMP), and a truncated Chebyshev polynomial filter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .basis import HaarBasis, KIND_SCALING
from .encoder import EncoderParams, EncoderLayer, edge_structural_similarities, init_encoder_params
from .graph import SparseGraph, normalized_laplacian
from .hierarchy import HaarTree, encoder_for_level

FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """All learnables for the hierarchical model.

    Gains are stored unconstrained: lambda_sc = sigmoid(theta_sc) stays in
    (0, 1) and wavelet gains are 1 + softplus(theta) >= 1, so no projection
    step is ever needed during optimization.
    """

    encoders: List[EncoderParams]
    theta_sc: np.ndarray
    theta_inter: np.ndarray
    theta_intra: np.ndarray
    level_proj: List[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray
    lambda_div: float = 0.4
    dropout: float = 0.1
    similarity_mode: str = "softmax"
    task: str = "node"

    def blocks(self) -> Dict[str, np.ndarray]:
        """Named views of every parameter array (mutated in place by the
        optimizer)."""
        out: Dict[str, np.ndarray] = {}
        for i, enc in enumerate(self.encoders):
            for k, layer in enumerate(enc.layers):
                out[f"enc{i}.l{k}.w_att"] = layer.w_att
                out[f"enc{i}.l{k}.W"] = layer.W
        out["gains.theta_sc"] = self.theta_sc
        out["gains.theta_inter"] = self.theta_inter
        out["gains.theta_intra"] = self.theta_intra
        for l, p in enumerate(self.level_proj):
            out[f"proj{l}"] = p
        out["head.W"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def num_levels(self) -> int:
        return len(self.theta_sc)

    def realized_gains(self, level: int) -> Tuple[float, float, float]:
        from .encoder import logistic

        sc = float(logistic(self.theta_sc[level]))
        inter = 1.0 + float(np.logaddexp(0.0, self.theta_inter[level]))
        intra = 1.0 + float(np.logaddexp(0.0, self.theta_intra[level]))
        return sc, inter, intra


@dataclass
class GcnParams:
    Ws: List[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    def blocks(self) -> Dict[str, np.ndarray]:
        out = {f"W{k}": w for k, w in enumerate(self.Ws)}
        out["head.W"] = self.head_w
        out["head.b"] = self.head_b
        return out


@dataclass
class ChebParams:
    theta: np.ndarray       # (R+1,) polynomial coefficients
    head_w: np.ndarray
    head_b: np.ndarray

    def blocks(self) -> Dict[str, np.ndarray]:
        return {"theta": self.theta, "head.W": self.head_w, "head.b": self.head_b}


def init_hmh_params(
    seed: int,
    d_in: int,
    num_classes: int,
    n_levels: int,
    task: str = "node",
    d_hidden: int = 64,
    enc_hidden: int = 16,
    encoder_layers=2,
    lambda_div: float = 0.4,
    dropout: float = 0.1,
    similarity_mode: str = "softmax",
    share_encoder: Optional[bool] = None,
    level_sizes: Optional[List[int]] = None,
    encoder_init: str = "he",
) -> ModelParams:
    rng = np.random.default_rng(seed)
    if share_encoder is None:
        share_encoder = task == "node"
    if isinstance(encoder_layers, int):
        layer_counts = [encoder_layers] * max(n_levels - 1, 1)
    else:
        layer_counts = list(encoder_layers) + [encoder_layers[-1]] * max(
            n_levels - 1 - len(encoder_layers), 0
        )
    if share_encoder:
        dims = [d_in] + [enc_hidden] * layer_counts[0]
        encoders = [init_encoder_params(rng, dims, weight_init=encoder_init)]
    else:
        first = [d_in] + [enc_hidden] * layer_counts[0]
        encoders = [init_encoder_params(rng, first, weight_init=encoder_init)]
        for l in range(1, max(n_levels - 1, 1)):
            rest = [enc_hidden] * (layer_counts[l] + 1)
            encoders.append(init_encoder_params(rng, rest, weight_init=encoder_init))
    proj_in = d_in if task == "node" else enc_hidden
    scale_p = np.sqrt(2.0 / (proj_in + d_hidden))
    # coarse features are probability-weighted sums, so their magnitude grows
    # with cluster mass; scale each level's projection init down accordingly
    # to keep initial level contributions comparable in the additive fusion
    if level_sizes is not None and task == "node":
        mass = [level_sizes[0] / max(s, 1) for s in level_sizes]
        mass += [mass[-1]] * max(n_levels - len(mass), 0)
    else:
        mass = [1.0] * n_levels
    level_proj = [
        rng.normal(0.0, scale_p / mass[l], size=(proj_in, d_hidden))
        for l in range(n_levels)
    ]
    scale_h = np.sqrt(2.0 / (d_hidden + num_classes))
    return ModelParams(
        encoders=encoders,
        theta_sc=np.full(n_levels, np.log(0.8 / 0.2)),          # lambda_sc ~ 0.8
        theta_inter=np.full(n_levels, np.log(np.expm1(0.5))),   # lambda ~ 1.5
        theta_intra=np.full(n_levels, np.log(np.expm1(0.5))),
        level_proj=level_proj,
        head_w=rng.normal(0.0, scale_h, size=(d_hidden, num_classes)),
        head_b=np.zeros(num_classes),
        lambda_div=lambda_div,
        dropout=dropout,
        similarity_mode=similarity_mode,
        task=task,
    )


def init_gcn_params(
    seed: int, d_in: int, num_classes: int, hidden: int = 32, layers: int = 2
) -> GcnParams:
    rng = np.random.default_rng(seed)
    dims = [d_in] + [hidden] * layers
    Ws = [
        rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b))
        for a, b in zip(dims[:-1], dims[1:])
    ]
    scale_h = np.sqrt(2.0 / (hidden + num_classes))
    return GcnParams(
        Ws=Ws,
        head_w=rng.normal(0.0, scale_h, size=(hidden, num_classes)),
        head_b=np.zeros(num_classes),
    )


# ---------------------------------------------------------------------------
# AD building blocks


def _basis_csr(basis: HaarBasis):
    cache = getattr(basis, "_op_cache", None)
    if cache is None:
        cache = {
            "csr": basis.U.tocsr(),
            "csr_t": basis.U.T.tocsr(),
        }
        object.__setattr__(basis, "_op_cache", cache)
    return cache["csr"], cache["csr_t"]


def gains_column_var(var_map, level: int, basis: HaarBasis) -> ad.Var:
    """Per-column gain vector for one level from the three raw parameters."""
    lam_sc = ad.sigmoid(ad.slice_1d(var_map["gains.theta_sc"], level, level + 1))
    one = ad.constant(np.ones(1))
    lam_inter = ad.add(one, ad.softplus(
        ad.slice_1d(var_map["gains.theta_inter"], level, level + 1)))
    lam_intra = ad.add(one, ad.softplus(
        ad.slice_1d(var_map["gains.theta_intra"], level, level + 1)))
    table = ad.concat_1d([lam_sc, lam_inter, lam_intra])
    return ad.gather_rows(table, basis.column_kind.astype(np.int64))


def filter_ad(basis: HaarBasis, lam: ad.Var, x: ad.Var) -> ad.Var:
    u, ut = _basis_csr(basis)
    coef = ad.csr_matmul(ut, x, mat_t=u)
    scaled = ad.mul(coef, ad.reshape(lam, (basis.n, 1)))
    return ad.csr_matmul(u, scaled, mat_t=ut)


def encoder_forward_ad(
    g: SparseGraph,
    x: ad.Var,
    enc_index: int,
    n_layers: int,
    var_map,
    activation: str,
    mode: str,
) -> ad.Var:
    """Differentiable encoder stack on one level's graph."""
    struct = ad.constant(edge_structural_similarities(g))
    src = g.row_of_entry()
    perm = g.transpose_permutation()
    z = x
    for k in range(n_layers):
        w_att = var_map[f"enc{enc_index}.l{k}.w_att"]
        w = var_map[f"enc{enc_index}.l{k}.W"]
        d = z.value.shape[1]
        xa = ad.matvec(z, ad.slice_1d(w_att, 0, d))
        xb = ad.matvec(z, ad.slice_1d(w_att, d, 2 * d))
        raw = ad.add(
            ad.sigmoid(ad.add(ad.gather_rows(xa, src), ad.gather_rows(xb, g.col_indices))),
            struct,
        )
        if mode == "softmax":
            sim = ad.segment_softmax_var(raw, g.row_offsets)
        else:
            sim = ad.sigmoid(raw)
        signed = ad.add(ad.scale(sim, 2.0), ad.constant(np.full(g.num_entries, -1.0)))
        prop = ad.edge_weighted_matmul(
            signed, z, g.row_offsets, g.col_indices, perm, g.n
        )
        z = ad.matmul(prop, w)
        if activation == "relu":
            z = ad.relu(z)
    return z


def _soft_assign_ad(level, zn: ad.Var) -> Tuple[ad.Var, ad.Var, dict]:
    """Differentiable soft assignment + per-level mean entropy.

    Returns (aggregation closure inputs, entropy, info) -- callers aggregate
    with the returned pieces depending on dense/sparse candidates.
    """
    assign = level.assignment
    if assign.candidates is None:
        omega = ad.scale(
            ad.matmul(zn, ad.constant(assign.prototypes.T)), 1.0 / assign.tau
        )
        a_s = ad.row_softmax(omega)
        ent = ad.vmean(ad.row_entropy_from_scores(omega))
        return a_s, ent, {"dense": True}
    cand = assign.candidates
    rows = np.repeat(np.arange(cand.shape[0]), np.diff(cand.indptr))
    omega = ad.scale(
        ad.pairwise_rowdot(zn, assign.prototypes, rows, cand.indices),
        1.0 / assign.tau,
    )
    vals = ad.segment_softmax_var(omega, cand.indptr)
    ent = ad.vmean(ad.segment_entropy_from_scores(omega, cand.indptr))
    return vals, ent, {
        "dense": False,
        "indptr": cand.indptr,
        "indices": cand.indices,
        "K": assign.num_clusters,
    }


def _aggregate_ad(soft: ad.Var, x: ad.Var, info: dict) -> ad.Var:
    if info["dense"]:
        return ad.matmul(ad.transpose(soft), x)
    return ad.assign_weighted_aggregate(
        soft, x, info["indptr"], info["indices"], info["K"]
    )


def hmh_forward_node(
    tree: HaarTree,
    bases: List[HaarBasis],
    params: ModelParams,
    var_map=None,
    train: bool = False,
    drop_rng: Optional[np.random.Generator] = None,
) -> Tuple[ad.Var, List[ad.Var]]:
    """Multi-level filtering + projection + additive unpooling + head.

    Each node receives its own projected level-0 filter output plus the
    projected summary of its hard ancestor cluster at every coarser level.
    Returns (logits Var, per-level mean assignment entropies).
    """
    if var_map is None:
        var_map = make_var_map(params)
    anc = tree.ancestors()
    x = ad.constant(tree.levels[0].features)
    fused = None
    entropies: List[ad.Var] = []
    for l, level in enumerate(tree.levels):
        lam = gains_column_var(var_map, l, bases[l])
        h = filter_ad(bases[l], lam, x)
        s = ad.matmul(h, var_map[f"proj{l}"])
        contrib = s if l == 0 else ad.gather_rows(s, anc[l])
        fused = contrib if fused is None else ad.add(fused, contrib)
        if level.assignment is not None:
            enc_idx = 0 if len(params.encoders) == 1 else min(l, len(params.encoders) - 1)
            z = encoder_forward_ad(
                level.graph, x, enc_idx, len(params.encoders[enc_idx].layers),
                var_map, params.encoders[enc_idx].activation,
                params.similarity_mode,
            )
            zn = ad.l2_normalize_rows(z)
            soft, ent, info = _soft_assign_ad(level, zn)
            entropies.append(ent)
            x = _aggregate_ad(soft, x, info)
    fused = ad.dropout(fused, params.dropout if train else 0.0, drop_rng)
    logits = ad.add(ad.matmul(fused, var_map["head.W"]), var_map["head.b"])
    return logits, entropies


def hmh_forward_graph(
    tree: HaarTree,
    bases: List[HaarBasis],
    params: ModelParams,
    var_map=None,
    train: bool = False,
    drop_rng: Optional[np.random.Generator] = None,
) -> Tuple[ad.Var, List[ad.Var]]:
    """Graph-level readout from the final supernode.

    The upward chain interleaves per-level signed encoding with soft
    aggregation (coarsen -> encode -> pool), so the supernode's feature is a
    deep nonlinear summary; the coarsest filter gain and projection map it to
    logits.
    """
    if tree.levels[-1].n != 1:
        raise ModelError("graph task requires a tree coarsened to one node")
    if var_map is None:
        var_map = make_var_map(params)
    f = ad.constant(tree.levels[0].features)
    entropies: List[ad.Var] = []
    for l, level in enumerate(tree.levels[:-1]):
        enc_idx = 0 if len(params.encoders) == 1 else min(l, len(params.encoders) - 1)
        z = encoder_forward_ad(
            level.graph, f, enc_idx, len(params.encoders[enc_idx].layers),
            var_map, params.encoders[enc_idx].activation,
            params.similarity_mode,
        )
        # filter before pooling: the >=1 wavelet gains give each macro-layer
        # a trainable amplification channel against long-range attenuation
        lam = gains_column_var(var_map, min(l, params.num_levels() - 1), bases[l])
        h = filter_ad(bases[l], lam, z)
        zn = ad.l2_normalize_rows(z)
        soft, ent, info = _soft_assign_ad(level, zn)
        entropies.append(ent)
        f = _aggregate_ad(soft, h, info)
    top = len(tree.levels) - 1
    lam = gains_column_var(var_map, min(top, params.num_levels() - 1), bases[top])
    h = filter_ad(bases[top], lam, f)
    emb = ad.matmul(h, var_map[f"proj{min(top, len(params.level_proj) - 1)}"])
    emb = ad.dropout(emb, params.dropout if train else 0.0, drop_rng)
    logits = ad.add(ad.matmul(emb, var_map["head.W"]), var_map["head.b"])
    return logits, entropies


def make_var_map(params) -> Dict[str, ad.Var]:
    return {name: ad.Var(arr, name=name) for name, arr in params.blocks().items()}


# ---------------------------------------------------------------------------
# losses


def diversity_loss(assignments: List[np.ndarray]) -> float:
    """Mean per-node Shannon entropy of each soft assignment, summed over
    levels (natural log; 0 log 0 := 0)."""
    total = 0.0
    for soft in assignments:
        if sp.issparse(soft):
            soft = np.asarray(soft.todense())
        p = np.asarray(soft, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        total += float(-plogp.sum(axis=1).mean())
    return total


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask=None) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if mask is not None:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise ModelError("empty mask")
        logits, labels = logits[idx], labels[idx]
    m = logits.max(axis=1, keepdims=True)
    logp = (logits - m) - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def total_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    assignments: List[np.ndarray],
    lambda_div: float,
    mask=None,
) -> float:
    """Cross-entropy minus lambda_div times the assignment diversity."""
    return cross_entropy(logits, labels, mask) - lambda_div * diversity_loss(assignments)


# ---------------------------------------------------------------------------
# baselines


def gcn_propagation(g: SparseGraph) -> sp.csr_matrix:
    """Self-loop normalized propagation operator D^-1/2 (A + I) D^-1/2."""
    key = "gcn_prop"
    if key not in g._cache:
        a = g.to_scipy(np.ones(g.num_entries)) + sp.identity(g.n, format="csr")
        deg = np.asarray(a.sum(axis=1)).ravel()
        d = sp.diags(1.0 / np.sqrt(deg))
        g._cache[key] = (d @ a @ d).tocsr()
    return g._cache[key]


def gcn_forward(
    g: SparseGraph,
    X: np.ndarray,
    params: GcnParams,
    var_map=None,
    pool: bool = False,
) -> ad.Var:
    """k layers of relu(P H W); per-node logits, or mean-pooled for graphs."""
    if var_map is None:
        var_map = make_var_map(params)
    p = gcn_propagation(g)
    h = ad.constant(np.asarray(X, dtype=np.float64))
    for k in range(len(params.Ws)):
        h = ad.relu(ad.matmul(ad.csr_matmul(p, h, mat_t=p), var_map[f"W{k}"]))
    if pool:
        h = ad.scale(ad.reshape(ad.vsum(h, axis=0), (1, h.value.shape[1])), 1.0 / g.n)
    return ad.add(ad.matmul(h, var_map["head.W"]), var_map["head.b"])


def smp_sign_matrix(g: SparseGraph, labels: np.ndarray) -> sp.csr_matrix:
    """S_uv = +1 on same-label edges, -1 on different-label edges."""
    labels = np.asarray(labels)
    src = g.row_of_entry()
    signs = np.where(labels[src] == labels[g.col_indices], 1.0, -1.0)
    return g.to_scipy(signs)


def smp_forward(
    g: SparseGraph,
    X: np.ndarray,
    labels: np.ndarray,
    n_layers: int,
    Ws: Optional[List[np.ndarray]] = None,
    activation: str = "identity",
    sign_matrix: Optional[sp.spmatrix] = None,
) -> List[np.ndarray]:
    """Label-signed propagation H <- sigma(S H W); returns every layer output.

    ``activation='identity'`` gives the linear variant used by the two-step
    sign-flip analysis; pass an explicit involutive ``sign_matrix`` to
    reproduce it exactly.
    """
    s = sign_matrix if sign_matrix is not None else smp_sign_matrix(g, labels)
    h = np.asarray(X, dtype=np.float64)
    outs = [h]
    for k in range(n_layers):
        h = s @ h
        if Ws is not None:
            h = h @ Ws[k % len(Ws)]
        if activation == "relu":
            h = np.maximum(h, 0.0)
        outs.append(h)
    return outs


def cheb_filter(g: SparseGraph, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Sum_r theta_r T_r(L - I) X via the three-term recurrence."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size < 1:
        raise ModelError("theta must be a non-empty vector")
    lap = normalized_laplacian(g) - sp.identity(g.n, format="csr")
    t_prev = np.asarray(X, dtype=np.float64)
    out = theta[0] * t_prev
    if theta.size == 1:
        return out
    t_cur = lap @ t_prev
    out = out + theta[1] * t_cur
    for r in range(2, theta.size):
        t_next = 2.0 * (lap @ t_cur) - t_prev
        out = out + theta[r] * t_next
        t_prev, t_cur = t_cur, t_next
    return out


def cheb_basis_columns(g: SparseGraph, anchor: int, order: int = 4) -> np.ndarray:
    """Orthonormalized polynomial columns anchored at one node.

    Spans {T_0 delta, ..., T_order delta}; Gram-Schmidt in float64.  Used to
    contrast polynomial density against the local wavelets.
    """
    delta = np.zeros((g.n, 1))
    delta[anchor, 0] = 1.0
    lap = normalized_laplacian(g) - sp.identity(g.n, format="csr")
    cols = [delta[:, 0]]
    t_prev = delta[:, 0]
    t_cur = lap @ t_prev
    cols.append(t_cur)
    for r in range(2, order + 1):
        t_next = 2.0 * (lap @ t_cur) - t_prev
        cols.append(t_next)
        t_prev, t_cur = t_cur, t_next
    basis = []
    for c in cols:
        v = c.copy()
        for b in basis:
            v -= (b @ c) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-12:
            basis.append(v / nrm)
    return np.stack(basis, axis=1)


# ---------------------------------------------------------------------------
# serialization


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params) -> dict:
    if isinstance(params, ModelParams):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "hmh",
            "task": params.task,
            "similarity_mode": params.similarity_mode,
            "lambda_div": params.lambda_div,
            "dropout": params.dropout,
            "activation": params.encoders[0].activation,
            "encoders": [
                [{"w_att": _arr(l.w_att), "W": _arr(l.W)} for l in enc.layers]
                for enc in params.encoders
            ],
            "theta_sc": _arr(params.theta_sc),
            "theta_inter": _arr(params.theta_inter),
            "theta_intra": _arr(params.theta_intra),
            "level_proj": [_arr(p) for p in params.level_proj],
            "head_w": _arr(params.head_w),
            "head_b": _arr(params.head_b),
        }
    if isinstance(params, GcnParams):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "gcn",
            "Ws": [_arr(w) for w in params.Ws],
            "head_w": _arr(params.head_w),
            "head_b": _arr(params.head_b),
        }
    if isinstance(params, ChebParams):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "cheb",
            "theta": _arr(params.theta),
            "head_w": _arr(params.head_w),
            "head_b": _arr(params.head_b),
        }
    raise ModelError(f"cannot serialize {type(params).__name__}")


def params_from_dict(obj: dict):
    if obj.get("format_version") != FORMAT_VERSION:
        raise ModelError(
            f"checkpoint format_version {obj.get('format_version')!r} != {FORMAT_VERSION}"
        )
    kind = obj.get("kind")
    if kind == "hmh":
        encoders = [
            EncoderParams(
                [EncoderLayer(_unarr(l["w_att"]), _unarr(l["W"])) for l in enc],
                obj.get("activation", "relu"),
            )
            for enc in obj["encoders"]
        ]
        return ModelParams(
            encoders=encoders,
            theta_sc=_unarr(obj["theta_sc"]),
            theta_inter=_unarr(obj["theta_inter"]),
            theta_intra=_unarr(obj["theta_intra"]),
            level_proj=[_unarr(p) for p in obj["level_proj"]],
            head_w=_unarr(obj["head_w"]),
            head_b=_unarr(obj["head_b"]),
            lambda_div=obj["lambda_div"],
            dropout=obj["dropout"],
            similarity_mode=obj["similarity_mode"],
            task=obj["task"],
        )
    if kind == "gcn":
        return GcnParams(
            Ws=[_unarr(w) for w in obj["Ws"]],
            head_w=_unarr(obj["head_w"]),
            head_b=_unarr(obj["head_b"]),
        )
    if kind == "cheb":
        return ChebParams(
            theta=_unarr(obj["theta"]),
            head_w=_unarr(obj["head_w"]),
            head_b=_unarr(obj["head_b"]),
        )
    raise ModelError(f"unknown checkpoint kind {kind!r}")


def save_params(params, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path):
    with open(path) as fh:
        return params_from_dict(json.load(fh))
