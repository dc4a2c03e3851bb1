"""Gradient evaluation, AdamW optimization, training loops, and the
finite-difference gradient verifier."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .basis import assemble_basis
from .data import Dataset, GraphDataset
from .hierarchy import build_hierarchy, level_size_schedule
from .metrics import dirichlet_energy, evaluate_predictions
from .model import (
    ChebParams,
    GcnParams,
    ModelParams,
    cheb_filter,
    gcn_forward,
    hmh_forward_graph,
    hmh_forward_node,
    init_gcn_params,
    init_hmh_params,
    make_var_map,
)


class TrainError(RuntimeError):
    pass


class DivergenceError(TrainError):
    """Raised when the loss goes non-finite; carries the history so far."""

    def __init__(self, message: str, history: List[dict]):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 200
    patience: int = 50
    seed: int = 0
    lambda_div: float = 0.4
    refresh_every: int = 25
    deterministic: bool = True
    ratio: float = 0.5
    threshold: int = 4
    tau: float = 1.0
    d_hidden: int = 64
    enc_hidden: int = 16
    encoder_layers: object = 2
    dropout: float = 0.1
    similarity_mode: str = "softmax"
    metric: str = "accuracy"
    coarsen_method: str = "kmeans"
    gcn_layers: int = 2
    gcn_hidden: int = 32
    cheb_order: int = 4
    batch_size: int = 32
    encoder_init: str = "he"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience > self.epochs:
            raise ValueError("patience must be <= epochs")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(blocks: Dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(a) for k, a in blocks.items()},
            v={k: np.zeros_like(a) for k, a in blocks.items()},
        )


def adam_step(
    state: AdamState,
    blocks: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Adaptive-moment update with decoupled weight decay, in place."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in blocks.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if weight_decay:
            p -= lr * weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# losses and gradients


def _sum_entropies(entropies: List[ad.Var]) -> Optional[ad.Var]:
    if not entropies:
        return None
    total = entropies[0]
    for e in entropies[1:]:
        total = ad.add(total, e)
    return total


def node_loss(
    tree,
    bases,
    params: ModelParams,
    dataset: Dataset,
    mask: np.ndarray,
    var_map=None,
    train: bool = False,
    drop_rng=None,
    aux: Optional[dict] = None,
) -> Tuple[ad.Var, dict]:
    if var_map is None:
        var_map = make_var_map(params)
    logits, entropies = hmh_forward_node(
        tree, bases, params, var_map, train=train, drop_rng=drop_rng
    )
    ce = ad.cross_entropy_masked(logits, dataset.labels.labels, mask)
    loss = ce
    ldiv = _sum_entropies(entropies)
    if ldiv is not None and params.lambda_div != 0.0:
        loss = ad.sub(ce, ad.scale(ldiv, params.lambda_div))
    if aux is not None:
        aux["logits"] = logits.value
    return loss, var_map


def graph_batch_loss(
    items: Sequence[Tuple[GraphDataset, object, object]],
    params: ModelParams,
    var_map=None,
    train: bool = False,
    drop_rng=None,
    aux: Optional[dict] = None,
) -> Tuple[ad.Var, dict]:
    """Mean total loss over a batch of (graph, tree, bases) triples."""
    if var_map is None:
        var_map = make_var_map(params)
    total = None
    logits_out = []
    for gd, tree, bases in items:
        logits, entropies = hmh_forward_graph(
            tree, bases, params, var_map, train=train, drop_rng=drop_rng
        )
        ce = ad.cross_entropy_masked(
            logits, np.array([gd.label]), np.array([True])
        )
        loss = ce
        ldiv = _sum_entropies(entropies)
        if ldiv is not None and params.lambda_div != 0.0:
            loss = ad.sub(ce, ad.scale(ldiv, params.lambda_div))
        total = loss if total is None else ad.add(total, loss)
        logits_out.append(logits.value[0])
    total = ad.scale(total, 1.0 / len(items))
    if aux is not None:
        aux["logits"] = np.stack(logits_out)
    return total, var_map


def extract_grads(
    params, var_map: Dict[str, ad.Var]
) -> Dict[str, np.ndarray]:
    """Pull gradients out of the tape; missing blocks get zeros.

    Raises TrainError naming the first block with a non-finite gradient.
    """
    grads: Dict[str, np.ndarray] = {}
    for name, arr in params.blocks().items():
        v = var_map[name]
        g = v.grad if v.grad is not None else np.zeros_like(arr)
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in block {name!r}")
        grads[name] = g
    return grads


def compute_gradients(
    params: ModelParams,
    tree,
    bases,
    dataset: Dataset,
    mask: np.ndarray,
    train: bool = True,
    drop_rng=None,
) -> Tuple[Dict[str, np.ndarray], float]:
    """Exact gradients of the total loss for every parameter block."""
    loss, var_map = node_loss(
        tree, bases, params, dataset, mask, train=train, drop_rng=drop_rng
    )
    if not np.isfinite(loss.value):
        raise DivergenceError("non-finite loss", history=[])
    ad.backward(loss)
    return extract_grads(params, var_map), float(loss.value)


@dataclass
class GradCheckReport:
    block_errors: Dict[str, float]
    max_error: float
    tol: float
    passed: bool

    def __str__(self):
        lines = [f"gradient check (tol {self.tol:g}): "
                 f"{'PASS' if self.passed else 'FAIL'} max {self.max_error:.3e}"]
        for name, err in sorted(self.block_errors.items()):
            lines.append(f"  {name:24s} {err:.3e}")
        return "\n".join(lines)


def finite_difference_check(
    loss_fn: Callable[[], float],
    blocks: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Central differences per scalar parameter against analytic gradients.

    Relative error per element is |a - n| / max(1, |a|, |n|); the report
    carries the max per block.  Intended for tiny float64 models only.
    """
    errors: Dict[str, float] = {}
    for name, arr in blocks.items():
        worst = 0.0
        a_grad = analytic[name]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = loss_fn()
            arr[idx] = old - h
            fm = loss_fn()
            arr[idx] = old
            num = (fp - fm) / (2.0 * h)
            a = float(a_grad[idx])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
            it.iternext()
        errors[name] = worst
    max_error = max(errors.values()) if errors else 0.0
    return GradCheckReport(errors, max_error, tol, max_error <= tol)


# ---------------------------------------------------------------------------
# model runners (forward passes uniform across model kinds)


def hmh_refresh(dataset: Dataset, params: ModelParams, config: TrainConfig):
    tree = build_hierarchy(
        dataset.graph,
        dataset.features,
        params.encoders,
        ratio=config.ratio,
        threshold=config.threshold,
        tau=config.tau,
        seed=config.seed,
        similarity_mode=params.similarity_mode,
        method=config.coarsen_method,
        chain="raw",
    )
    return tree, assemble_basis(tree)


def hmh_refresh_graphs(
    graphs: Sequence[GraphDataset], params: ModelParams, config: TrainConfig
):
    out = []
    for gd in graphs:
        tree = build_hierarchy(
            gd.graph,
            gd.features,
            params.encoders,
            ratio=config.ratio,
            threshold=1,
            tau=config.tau,
            seed=config.seed,
            coarsen_to_one=True,
            similarity_mode=params.similarity_mode,
            method=config.coarsen_method,
            chain="encoded",
        )
        out.append((tree, assemble_basis(tree)))
    return out


def cheb_feature_stack(g, X, order: int) -> List[np.ndarray]:
    """T_r(L - I) X for r = 0..order (constants during training)."""
    stack = []
    for r in range(order + 1):
        theta = np.zeros(order + 1)
        theta[r] = 1.0
        stack.append(cheb_filter(g, X, theta[: r + 1]))
    return stack


def cheb_logits(stack: List[np.ndarray], params: ChebParams, var_map) -> ad.Var:
    h = None
    for r, tr in enumerate(stack):
        term = ad.mul(ad.slice_1d(var_map["theta"], r, r + 1), ad.constant(tr))
        h = term if h is None else ad.add(h, term)
    return ad.add(ad.matmul(h, var_map["head.W"]), var_map["head.b"])


def init_cheb_params(seed: int, d_in: int, num_classes: int, order: int) -> ChebParams:
    rng = np.random.default_rng(seed)
    theta = np.zeros(order + 1)
    theta[0] = 1.0
    scale = np.sqrt(2.0 / (d_in + num_classes))
    return ChebParams(
        theta=theta,
        head_w=rng.normal(0.0, scale, size=(d_in, num_classes)),
        head_b=np.zeros(num_classes),
    )


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: object
    history: List[dict]
    best_val_loss: float
    best_epoch: int
    test_metric: Optional[float] = None
    # hierarchy active at the best epoch (hierarchical model only); parameters
    # co-adapt to the refresh-time tree, so evaluation must reuse it
    tree: object = None
    bases: object = None
    forests: object = None


def _history_row(epoch, train_loss, val_loss, val_metric, energy) -> dict:
    return {
        "epoch": epoch,
        "train_loss": train_loss,
        "val_loss": val_loss,
        "val_metric": val_metric,
        "dirichlet_energy": energy,
    }


def history_to_csv(history: List[dict]) -> str:
    lines = ["epoch,train_loss,val_loss,val_metric,dirichlet_energy"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_loss']:.12g},{row['val_loss']:.12g},"
            f"{row['val_metric']:.12g},{row['dirichlet_energy']:.12g}"
        )
    return "\n".join(lines) + "\n"


def train_node(
    dataset: Dataset, config: TrainConfig, model: str = "hmh"
) -> TrainResult:
    """Full-batch node-classification training with early stopping.

    The hierarchy is rebuilt from the current encoder every
    ``refresh_every`` epochs and held fixed in between.  Best-validation
    parameters are restored at the end.
    """
    if not dataset.train_mask.any():
        raise TrainError("empty train mask")
    labels = dataset.labels.labels
    num_classes = dataset.labels.num_classes
    d_in = dataset.features.shape[1]
    drop_rng = np.random.default_rng(config.seed + 9999)

    if model == "hmh":
        schedule = level_size_schedule(
            dataset.graph.n, config.ratio, config.threshold
        )
        params = init_hmh_params(
            config.seed, d_in, num_classes, n_levels=len(schedule), task="node",
            d_hidden=config.d_hidden, enc_hidden=config.enc_hidden,
            encoder_layers=config.encoder_layers, lambda_div=config.lambda_div,
            dropout=config.dropout, similarity_mode=config.similarity_mode,
            level_sizes=schedule,
        )
    elif model == "gcn":
        params = init_gcn_params(
            config.seed, d_in, num_classes, hidden=config.gcn_hidden,
            layers=config.gcn_layers,
        )
    elif model == "cheb":
        params = init_cheb_params(config.seed, d_in, num_classes, config.cheb_order)
    else:
        raise TrainError(f"unknown node model {model!r}")

    tree = bases = best_tree = best_bases = None
    cheb_stack = (
        cheb_feature_stack(dataset.graph, dataset.features, config.cheb_order)
        if model == "cheb"
        else None
    )
    state = AdamState.init(params.blocks())
    history: List[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_params = copy.deepcopy(params)
    bad_epochs = 0

    for epoch in range(config.epochs):
        if model == "hmh" and (tree is None or epoch % config.refresh_every == 0):
            tree, bases = hmh_refresh(dataset, params, config)

        # gradient step on the training mask
        if model == "hmh":
            loss_var, var_map = node_loss(
                tree, bases, params, dataset, dataset.train_mask,
                train=True, drop_rng=drop_rng,
            )
        else:
            var_map = make_var_map(params)
            if model == "gcn":
                logits = gcn_forward(dataset.graph, dataset.features, params, var_map)
            else:
                logits = cheb_logits(cheb_stack, params, var_map)
            loss_var = ad.cross_entropy_masked(logits, labels, dataset.train_mask)
        train_loss = float(loss_var.value)
        if not np.isfinite(train_loss):
            raise DivergenceError(
                f"non-finite training loss at epoch {epoch}", history
            )
        ad.backward(loss_var)
        grads = extract_grads(params, var_map)
        adam_step(state, params.blocks(), grads, config.lr, config.weight_decay)

        # evaluation pass (no dropout); early stopping tracks validation
        # cross-entropy -- the diversity term is a training regularizer and
        # would otherwise dominate model selection
        aux: dict = {}
        if model == "hmh":
            logits_v, _ = hmh_forward_node(tree, bases, params, make_var_map(params))
            aux["logits"] = logits_v.value
            val_loss = float(
                ad.cross_entropy_masked(logits_v, labels, dataset.val_mask).value
            )
        else:
            vm = make_var_map(params)
            if model == "gcn":
                logits_v = gcn_forward(dataset.graph, dataset.features, params, vm)
            else:
                logits_v = cheb_logits(cheb_stack, params, vm)
            aux["logits"] = logits_v.value
            val_loss = float(
                ad.cross_entropy_masked(logits_v, labels, dataset.val_mask).value
            )
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite val loss at epoch {epoch}", history)
        val_metric = evaluate_predictions(
            aux["logits"], labels, dataset.val_mask, config.metric
        )
        energy = dirichlet_energy(dataset.graph, aux["logits"])
        history.append(_history_row(epoch, train_loss, val_loss, val_metric, energy))

        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            best_params = copy.deepcopy(params)
            best_tree, best_bases = tree, bases
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break

    result = TrainResult(best_params, history, best_val, best_epoch)
    aux = {}
    if model == "hmh":
        result.tree, result.bases = best_tree, best_bases
        node_loss(best_tree, best_bases, best_params, dataset,
                  dataset.val_mask, aux=aux)
    else:
        vm = make_var_map(best_params)
        if model == "gcn":
            aux["logits"] = gcn_forward(
                dataset.graph, dataset.features, best_params, vm
            ).value
        else:
            aux["logits"] = cheb_logits(cheb_stack, best_params, vm).value
    if dataset.test_mask.any():
        result.test_metric = evaluate_predictions(
            aux["logits"], labels, dataset.test_mask, config.metric
        )
    return result


def predict_node_logits(
    dataset: Dataset, params, config: TrainConfig, tree=None, bases=None
) -> np.ndarray:
    """Forward pass with trained parameters.

    Pass the training-time (tree, bases) when available; otherwise the
    hierarchy is rebuilt deterministically from the parameters.
    """
    if isinstance(params, ModelParams):
        if tree is None or bases is None:
            tree, bases = hmh_refresh(dataset, params, config)
        aux: dict = {}
        node_loss(tree, bases, params, dataset, dataset.val_mask
                  if dataset.val_mask.any() else dataset.train_mask, aux=aux)
        return aux["logits"]
    vm = make_var_map(params)
    if isinstance(params, GcnParams):
        return gcn_forward(dataset.graph, dataset.features, params, vm).value
    if isinstance(params, ChebParams):
        stack = cheb_feature_stack(dataset.graph, dataset.features,
                                   len(params.theta) - 1)
        return cheb_logits(stack, params, vm).value
    raise TrainError(f"unknown params type {type(params).__name__}")


def train_graphs(
    graphs: Sequence[GraphDataset],
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    test_idx: np.ndarray,
    config: TrainConfig,
    model: str = "hmh",
) -> TrainResult:
    """Mini-batch graph-classification training with early stopping."""
    if len(train_idx) == 0:
        raise TrainError("empty train split")
    num_classes = graphs[0].num_classes
    d_in = graphs[0].features.shape[1]
    drop_rng = np.random.default_rng(config.seed + 9999)
    shuffle_rng = np.random.default_rng(config.seed + 555)

    if model == "hmh":
        schedule = level_size_schedule(
            max(g.graph.n for g in graphs), config.ratio, 1, coarsen_to_one=True
        )
        params = init_hmh_params(
            config.seed, d_in, num_classes, n_levels=len(schedule), task="graph",
            d_hidden=config.d_hidden, enc_hidden=config.enc_hidden,
            encoder_layers=config.encoder_layers, lambda_div=config.lambda_div,
            dropout=config.dropout, similarity_mode=config.similarity_mode,
            share_encoder=False, encoder_init=config.encoder_init,
        )
        forests = None
    elif model == "gcn":
        params = init_gcn_params(
            config.seed, d_in, num_classes, hidden=config.gcn_hidden,
            layers=config.gcn_layers,
        )
        forests = None
    else:
        raise TrainError(f"unknown graph model {model!r}")

    state = AdamState.init(params.blocks())
    history: List[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_params = copy.deepcopy(params)
    best_forests = forests
    bad_epochs = 0

    def graph_logits_eval(p, idx, forest) -> np.ndarray:
        rows = []
        vm = make_var_map(p)
        for i in idx:
            gd = graphs[i]
            if model == "hmh":
                tree, bs = forest[i]
                lg, _ = hmh_forward_graph(tree, bs, p, vm)
                rows.append(lg.value[0])
            else:
                rows.append(
                    gcn_forward(gd.graph, gd.features, p, vm, pool=True).value[0]
                )
        return np.stack(rows)

    for epoch in range(config.epochs):
        if model == "hmh" and (forests is None or epoch % config.refresh_every == 0):
            forests = {}
            for i in np.concatenate([train_idx, val_idx, test_idx]):
                forests[int(i)] = hmh_refresh_graphs([graphs[int(i)]], params, config)[0]
        order = shuffle_rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            batch_idx = train_idx[order[lo:lo + config.batch_size]]
            var_map = make_var_map(params)
            if model == "hmh":
                items = [(graphs[int(i)],) + forests[int(i)] for i in batch_idx]
                loss_var, _ = graph_batch_loss(
                    items, params, var_map, train=True, drop_rng=drop_rng
                )
            else:
                total = None
                for i in batch_idx:
                    gd = graphs[int(i)]
                    lg = gcn_forward(gd.graph, gd.features, params, var_map, pool=True)
                    ce = ad.cross_entropy_masked(
                        lg, np.array([gd.label]), np.array([True])
                    )
                    total = ce if total is None else ad.add(total, ce)
                loss_var = ad.scale(total, 1.0 / len(batch_idx))
            if not np.isfinite(loss_var.value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}", history
                )
            ad.backward(loss_var)
            grads = extract_grads(params, var_map)
            adam_step(state, params.blocks(), grads, config.lr, config.weight_decay)
            epoch_loss += float(loss_var.value)
            n_batches += 1

        val_logits = graph_logits_eval(params, val_idx, forests)
        val_labels = np.array([graphs[int(i)].label for i in val_idx])
        val_loss = float(
            ad.cross_entropy_masked(
                ad.constant(val_logits), val_labels, np.ones(len(val_idx), bool)
            ).value
        )
        val_metric = evaluate_predictions(
            val_logits, val_labels, np.ones(len(val_idx), bool), config.metric
        )
        history.append(
            _history_row(epoch, epoch_loss / max(n_batches, 1), val_loss,
                         val_metric, 0.0)
        )
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            best_params = copy.deepcopy(params)
            best_forests = forests
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break

    result = TrainResult(best_params, history, best_val, best_epoch)
    if model == "hmh":
        forests = best_forests
        result.forests = best_forests
    test_logits = graph_logits_eval(best_params, test_idx, forests)
    test_labels = np.array([graphs[int(i)].label for i in test_idx])
    result.test_metric = evaluate_predictions(
        test_logits, test_labels, np.ones(len(test_idx), bool), config.metric
    )
    return result
