"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and remembers how it was produced; backward() walks
the tape in reverse topological order accumulating vector-Jacobian products.
Only the operations the models need are provided, including CSR sparse
products with differentiable edge data and per-row segment softmaxes.
Everything is float64 by default and fully deterministic.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .segments import expand, segment_softmax, segment_sum


class Var:
    """Node in the computation tape."""

    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple["Var", ...] = (),
        vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        requires_grad: bool = True,
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    # Sugar used sparingly; the model code mostly calls the op functions.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value: np.ndarray, name: str = "") -> Var:
    return Var(value, requires_grad=False, name=name)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(np.asarray(x, dtype=np.float64))


def backward(loss: Var) -> None:
    """Accumulate gradients of a scalar loss into every reachable Var."""
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    order: List[Var] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return Var(a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return Var(a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(a.value * b.value, (a, b), vjp)


def scale(a, c: float) -> Var:
    a = _as_var(a)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to the given shape (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def vjp(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return (ga, gb)

    return Var(a.value @ b.value, (a, b), vjp)


def matvec(a, w) -> Var:
    """(n, d) @ (d,) -> (n,)."""
    a, w = _as_var(a), _as_var(w)

    def vjp(g):
        ga = np.outer(g, w.value) if a.requires_grad else None
        gw = a.value.T @ g if w.requires_grad else None
        return (ga, gw)

    return Var(a.value @ w.value, (a, w), vjp)


def transpose(a) -> Var:
    a = _as_var(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Var:
    a = _as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_1d(parts: Sequence) -> Var:
    parts = [_as_var(p) for p in parts]
    sizes = [p.value.size for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[bounds[i]:bounds[i + 1]].reshape(p.value.shape)
            for i, p in enumerate(parts)
        )

    return Var(np.concatenate([p.value.ravel() for p in parts]), tuple(parts), vjp)


def slice_1d(a, start: int, stop: int) -> Var:
    a = _as_var(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return Var(a.value[start:stop], (a,), vjp)


def pairwise_rowdot(a, b_const: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Var:
    """out[e] = sum_d a[rows[e], d] * b[cols[e], d] with constant b."""
    a = _as_var(a)
    b_rows = b_const[cols]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, rows, g[:, None] * b_rows)
        return (out,)

    return Var(np.sum(a.value[rows] * b_rows, axis=1), (a,), vjp)


def vsum(a, axis=None) -> Var:
    a = _as_var(a)
    val = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.value, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return Var(val, (a,), vjp)


def vmean(a) -> Var:
    a = _as_var(a)
    n = a.value.size
    return scale(vsum(a), 1.0 / n)


def relu(a) -> Var:
    a = _as_var(a)
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = _as_var(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Var:
    """log(1 + exp(x)) computed stably; derivative is the logistic."""
    a = _as_var(a)
    x = a.value
    val = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return Var(val, (a,), lambda g: (g * sig,))


def l2_normalize_rows(a, eps: float = 0.0) -> Var:
    """Row-wise x / ||x||; zero rows pass through unchanged."""
    a = _as_var(a)
    x = a.value
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(nrm > eps, nrm, 1.0)
    y = x / safe

    def vjp(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / safe,)

    return Var(y, (a,), vjp)


def gather_rows(a, idx: np.ndarray) -> Var:
    """a[idx]; backward scatter-adds into the source rows."""
    a = _as_var(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), vjp)


def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> Var:
    """Inverted dropout; identity when rng is None or rate == 0."""
    a = _as_var(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return Var(a.value * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# softmaxes and losses


def row_softmax(a) -> Var:
    """Dense row-stochastic softmax."""
    a = _as_var(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return Var(p, (a,), vjp)


def row_entropy_from_scores(a) -> Var:
    """Shannon entropy of softmax(scores) per row, computed stably.

    H = lse(s) - sum_k p_k s_k; gradient dH/ds_j = -p_j (s_j - sum_k p_k s_k).
    """
    a = _as_var(a)
    s = a.value
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = (np.log(z) + m)[:, 0]
    sbar = np.sum(p * s, axis=1)
    h = lse - sbar

    def vjp(g):
        return (-g[:, None] * p * (s - sbar[:, None]),)

    return Var(h, (a,), vjp)


def segment_softmax_var(a, offsets: np.ndarray) -> Var:
    """Softmax within CSR row segments of a flat score vector."""
    a = _as_var(a)
    p = segment_softmax(a.value, offsets)

    def vjp(g):
        dot = segment_sum(g * p, offsets)
        return (p * (g - expand(dot, offsets)),)

    return Var(p, (a,), vjp)


def segment_entropy_from_scores(a, offsets: np.ndarray) -> Var:
    """Per-segment softmax entropy from flat scores (empty segments give 0)."""
    a = _as_var(a)
    s = a.value
    from .segments import segment_max

    m = segment_max(s, offsets, fill=0.0)
    e = np.exp(s - expand(m, offsets))
    z = segment_sum(e, offsets)
    nonempty = np.diff(offsets) > 0
    zsafe = np.where(nonempty, z, 1.0)
    p = e / expand(zsafe, offsets)
    lse = np.where(nonempty, np.log(zsafe) + m, 0.0)
    sbar = segment_sum(p * s, offsets)
    h = lse - sbar

    def vjp(g):
        return (-expand(g, offsets) * p * (s - expand(sbar, offsets)),)

    return Var(h, (a,), vjp)


def cross_entropy_masked(logits, labels: np.ndarray, mask: np.ndarray) -> Var:
    """Mean cross-entropy over masked rows (natural log, stable)."""
    logits = _as_var(logits)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("empty mask")
    z = logits.value[idx]
    y = np.asarray(labels, dtype=np.int64)[idx]
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(e.sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(len(idx)), y].mean())

    def vjp(g):
        out = np.zeros_like(logits.value)
        grad_rows = p.copy()
        grad_rows[np.arange(len(idx)), y] -= 1.0
        out[idx] = grad_rows * (float(g) / len(idx))
        return (out,)

    return Var(np.float64(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# sparse products


def csr_matmul(mat: sp.spmatrix, x, mat_t: Optional[sp.spmatrix] = None) -> Var:
    """Constant sparse matrix times differentiable dense matrix."""
    x = _as_var(x)
    mt = mat_t if mat_t is not None else mat.T.tocsr()

    def vjp(g):
        return (mt @ g,)

    return Var(mat @ x.value, (x,), vjp)


def edge_weighted_matmul(
    weights,
    x,
    row_offsets: np.ndarray,
    col_indices: np.ndarray,
    transpose_perm: np.ndarray,
    n: int,
) -> Var:
    """(A (w) @ X) where both the CSR edge data and X are differentiable.

    ``transpose_perm`` maps each directed entry (u, v) to its mirror (v, u)
    so the adjoint product reuses the same CSR structure.
    """
    weights, x = _as_var(weights), _as_var(x)
    a = sp.csr_matrix((weights.value, col_indices, row_offsets), shape=(n, n))
    out = a @ x.value
    src = np.repeat(np.arange(n), np.diff(row_offsets))

    def vjp(g):
        gw = None
        gx = None
        if weights.requires_grad:
            gw = np.sum(g[src] * x.value[col_indices], axis=1)
        if x.requires_grad:
            at = sp.csr_matrix(
                (weights.value[transpose_perm], col_indices, row_offsets),
                shape=(n, n),
            )
            gx = at @ g
        return (gw, gx)

    return Var(out, (weights, x), vjp)


def assign_weighted_aggregate(
    values,
    x,
    indptr: np.ndarray,
    indices: np.ndarray,
    K: int,
) -> Var:
    """S^T @ X for a CSR assignment matrix S (n x K) with differentiable data.

    Output row k sums values[e] * X[row(e)] over entries assigned to k.
    """
    values, x = _as_var(values), _as_var(x)
    n = len(indptr) - 1
    s = sp.csr_matrix((values.value, indices, indptr), shape=(n, K))
    out = s.T @ x.value
    rows = np.repeat(np.arange(n), np.diff(indptr))

    def vjp(g):
        gv = None
        gx = None
        if values.requires_grad:
            gv = np.sum(x.value[rows] * g[indices], axis=1)
        if x.requires_grad:
            gx = s @ g
        return (gv, gx)

    return Var(out, (values, x), vjp)
