"""Exact and simulated mixing diagnostics for random walk on a path with attached binary trees."""
from __future__ import annotations

__version__ = "0.1.0"

from .chain import ChainOperator, stationary_distribution, step_distribution, tv_distance
from .topology import (PATH, TreeFamilySpec, TreeGraph, VertexRef, build_family_tree,
                       canonical_starts, path_graph, single_tree)

__all__ = [
    "__version__", "PATH", "ChainOperator", "TreeFamilySpec", "TreeGraph", "VertexRef",
    "build_family_tree", "canonical_starts", "path_graph", "single_tree",
    "stationary_distribution", "step_distribution", "tv_distance",
]
