"""Row-segment reductions over CSR-like layouts (deterministic, vectorized)."""

from __future__ import annotations

import numpy as np


def segment_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-segment sum; empty segments yield 0. Works on (m,) or (m, d)."""
    n = len(offsets) - 1
    out_shape = (n,) + values.shape[1:]
    out = np.zeros(out_shape, dtype=values.dtype)
    nonempty = offsets[:-1] < offsets[1:]
    if not nonempty.any():
        return out
    res = np.add.reduceat(values, offsets[:-1][nonempty], axis=0)
    out[nonempty] = res
    return out


def segment_max(values: np.ndarray, offsets: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Per-segment max; empty segments yield ``fill``."""
    n = len(offsets) - 1
    out = np.full(n, fill, dtype=values.dtype)
    nonempty = offsets[:-1] < offsets[1:]
    if not nonempty.any():
        return out
    out[nonempty] = np.maximum.reduceat(values, offsets[:-1][nonempty])
    return out


def expand(per_segment: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Repeat each segment's value over its entries."""
    counts = np.diff(offsets)
    return np.repeat(per_segment, counts, axis=0)


def segment_softmax(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Numerically stable softmax within each segment of a flat value array."""
    if len(values) == 0:
        return values.astype(np.float64)
    m = segment_max(values, offsets)
    shifted = values - expand(m, offsets)
    e = np.exp(shifted)
    denom = segment_sum(e, offsets)
    return e / expand(denom, offsets)


def segment_normalize(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Divide each entry by its segment sum (segments assumed positive)."""
    denom = segment_sum(values, offsets)
    return values / expand(denom, offsets)
