"""Dataset container and the on-disk formats owned by the graph core.

Formats:
  * edge list: text, one ``u<TAB>v[<TAB>w]`` per line, ``#`` comments allowed
  * features:  CSV, one row per node, no header
  * labels:    CSV ``node_id,label``
  * splits:    JSON object with integer arrays ``train``, ``val``, ``test``
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import GraphError, SparseGraph, build_graph


def check_features(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != n:
        raise GraphError(f"feature matrix must be ({n}, d), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise GraphError("non-finite feature value")
    return x


@dataclass
class LabelVector:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise GraphError("label out of range")


@dataclass
class Dataset:
    """A node-task instance: graph + features + labels + boolean masks."""

    graph: SparseGraph
    features: np.ndarray
    labels: LabelVector
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        n = self.graph.n
        self.features = check_features(self.features, n)
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise GraphError(f"{name} must have shape ({n},)")
            setattr(self, name, m)
        if np.any(self.train_mask & self.val_mask) or np.any(
            self.train_mask & self.test_mask
        ) or np.any(self.val_mask & self.test_mask):
            raise GraphError("masks must be disjoint")
        if self.labels.labels.shape != (n,):
            raise GraphError("labels must be per node")


@dataclass
class GraphDataset:
    """A graph-task instance: one graph with a single integer label."""

    graph: SparseGraph
    features: np.ndarray
    label: int
    num_classes: int

    def __post_init__(self):
        self.features = check_features(self.features, self.graph.n)
        if not 0 <= self.label < self.num_classes:
            raise GraphError("graph label out of range")


def random_split(
    n: int, seed: int, train_frac: float = 0.6, val_frac: float = 0.2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic disjoint boolean masks covering all n nodes."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train:n_train + n_val]] = True
    test[order[n_train + n_val:]] = True
    return train, val, test


def stratified_split(
    labels: np.ndarray, seed: int, train_frac: float = 0.6, val_frac: float = 0.2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class random split so every class appears in every mask."""
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = max(1, int(round(train_frac * len(idx))))
        n_val = max(1, int(round(val_frac * len(idx))))
        train[idx[:n_train]] = True
        val[idx[n_train:n_train + n_val]] = True
        test[idx[n_train + n_val:]] = True
    return train, val, test


# ---------------------------------------------------------------------------
# File formats


def load_edge_list(path: str | Path, n: Optional[int] = None) -> SparseGraph:
    src, dst, w = [], [], []
    weighted = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise GraphError(f"{path}:{lineno}: expected 2 or 3 fields")
            src.append(int(parts[0]))
            dst.append(int(parts[1]))
            if len(parts) == 3:
                weighted = True
                w.append(float(parts[2]))
            else:
                w.append(1.0)
    edges = np.array(list(zip(src, dst)), dtype=np.int64).reshape(-1, 2)
    if n is None:
        n = int(edges.max()) + 1 if edges.size else 0
    return build_graph(edges, n, np.array(w) if weighted else None)


def save_edge_list(g: SparseGraph, path: str | Path) -> None:
    rows = g.row_of_entry()
    w = g.edge_weights()
    with open(path, "w") as fh:
        for e in range(g.num_entries):
            u, v = int(rows[e]), int(g.col_indices[e])
            if u < v:  # emit each undirected edge once
                if g.weights is not None:
                    fh.write(f"{u}\t{v}\t{w[e]:.17g}\n")
                else:
                    fh.write(f"{u}\t{v}\n")


def load_features(path: str | Path) -> np.ndarray:
    x = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(x)):
        raise GraphError(f"{path}: non-finite feature")
    return x


def save_features(x: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, x, delimiter=",", fmt="%.17g")


def load_labels(path: str | Path, n: int) -> LabelVector:
    raw = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    labels = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for node, lab in raw:
        if not 0 <= node < n:
            raise GraphError(f"{path}: node id {node} out of range")
        labels[node] = lab
        seen[node] = True
    if not seen.all():
        raise GraphError(f"{path}: missing labels for {int((~seen).sum())} nodes")
    return LabelVector(labels, int(labels.max()) + 1)


def save_labels(labels: LabelVector, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, lab in enumerate(labels.labels):
            fh.write(f"{i},{int(lab)}\n")


def load_splits(path: str | Path, n: int):
    with open(path) as fh:
        obj = json.load(fh)
    masks = []
    for key in ("train", "val", "test"):
        if key not in obj:
            raise GraphError(f"{path}: missing split '{key}'")
        idx = np.asarray(obj[key], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise GraphError(f"{path}: split index out of range")
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        masks.append(m)
    return tuple(masks)


def save_splits(train: np.ndarray, val: np.ndarray, test: np.ndarray, path: str | Path):
    obj = {
        "train": np.flatnonzero(train).tolist(),
        "val": np.flatnonzero(val).tolist(),
        "test": np.flatnonzero(test).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def save_dataset(ds: Dataset, outdir: str | Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_edge_list(ds.graph, outdir / "edges.tsv")
    save_features(ds.features, outdir / "features.csv")
    save_labels(ds.labels, outdir / "labels.csv")
    save_splits(ds.train_mask, ds.val_mask, ds.test_mask, outdir / "splits.json")


def load_dataset(indir: str | Path) -> Dataset:
    indir = Path(indir)
    for name in ("edges.tsv", "features.csv", "labels.csv", "splits.json"):
        if not (indir / name).exists():
            raise GraphError(f"missing dataset file: {indir / name}")
    feats = load_features(indir / "features.csv")
    g = load_edge_list(indir / "edges.tsv", n=feats.shape[0])
    labels = load_labels(indir / "labels.csv", g.n)
    train, val, test = load_splits(indir / "splits.json", g.n)
    return Dataset(g, feats, labels, train, val, test)
