"""Hierarchical multi-scale Haar spectral graph learning."""

__version__ = "0.1.0"

from .graph import SparseGraph, build_graph, normalized_laplacian, two_hop_set
from .data import Dataset, GraphDataset, LabelVector

__all__ = [
    "SparseGraph",
    "build_graph",
    "normalized_laplacian",
    "two_hop_set",
    "Dataset",
    "GraphDataset",
    "LabelVector",
]
