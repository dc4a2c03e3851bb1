"""Evaluation metrics shared by training and the benchmark suites."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .graph import SparseGraph, normalized_laplacian


class MetricError(ValueError):
    pass


def accuracy(predictions: np.ndarray, labels: np.ndarray, mask=None) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if mask is not None:
        predictions, labels = predictions[mask], labels[mask]
    if len(labels) == 0:
        raise MetricError("empty evaluation set")
    return float((predictions == labels).mean())


def binary_auc(scores: np.ndarray, labels: np.ndarray, mask=None) -> float:
    """ROC-AUC via the rank statistic; tied scores get midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if mask is not None:
        scores, labels = scores[mask], labels[mask]
    classes = np.unique(labels)
    if classes.size > 2:
        raise MetricError("AUC requires binary labels")
    pos = labels == labels.max()
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # midranks for ties
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_predictions(
    logits: np.ndarray, labels: np.ndarray, mask, metric: str
) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if metric == "accuracy":
        return accuracy(np.argmax(logits, axis=1), labels, mask)
    if metric == "auc":
        if logits.shape[1] > 2:
            raise MetricError("AUC requested with more than 2 classes")
        score = logits[:, 1] - logits[:, 0] if logits.shape[1] == 2 else logits[:, 0]
        return binary_auc(score, labels, mask)
    raise MetricError(f"unknown metric {metric!r}")


def dirichlet_energy(g: SparseGraph, H: np.ndarray) -> float:
    """(1/N) trace(H^T L H) with the normalized Laplacian; 0 iff H constant
    per connected component."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 1:
        H = H[:, None]
    if H.shape[0] != g.n:
        raise MetricError("H rows must match node count")
    lap = normalized_laplacian(g)
    return float(np.sum(H * (lap @ H)) / g.n)


def separation_ratio(embeddings: np.ndarray, groups: np.ndarray) -> float:
    """||mean_A - mean_B|| / ||mean_A - mean_H||; groups coded 0=A, 1=B, 2=hub.

    Returns +inf when the denominator vanishes.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    groups = np.asarray(groups)
    means = []
    for gid in (0, 1, 2):
        rows = embeddings[groups == gid]
        if rows.shape[0] == 0:
            raise MetricError(f"group {gid} is empty")
        means.append(rows.mean(axis=0))
    num = float(np.linalg.norm(means[0] - means[1]))
    den = float(np.linalg.norm(means[0] - means[2]))
    if den == 0.0:
        return float("inf")
    return num / den


def degree_stratified_accuracy(
    predictions: np.ndarray,
    labels: np.ndarray,
    degrees: np.ndarray,
    thresholds: Tuple[float, float],
    mask=None,
) -> Dict[str, Optional[float]]:
    """Accuracy over degree cohorts d <= lo, lo < d <= hi, d > hi.

    Empty cohorts are reported as None.
    """
    lo, hi = thresholds
    if not lo < hi:
        raise MetricError("thresholds must satisfy lo < hi")
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    degrees = np.asarray(degrees)
    if mask is None:
        mask = np.ones(len(labels), dtype=bool)
    out: Dict[str, Optional[float]] = {}
    cohorts = {
        "spokes": mask & (degrees <= lo),
        "medium": mask & (degrees > lo) & (degrees <= hi),
        "hubs": mask & (degrees > hi),
    }
    for name, sel in cohorts.items():
        out[name] = accuracy(predictions, labels, sel) if sel.any() else None
    return out
