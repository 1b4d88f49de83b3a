"""Per-layer dynamic K-nearest-neighbour graphs and neighbourhood geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor


@dataclass(frozen=True)
class NeighborGraph:
    """K-neighbour index table.

    ``indices[i, 0] == i`` always.  Remaining slots are sorted by ascending
    distance, ties by ascending index.  When ``N < K`` the surplus slots
    repeat the self index.
    """

    indices: np.ndarray
    k: int
    space_dim: int

    @property
    def n(self):
        return self.indices.shape[0]


@dataclass(frozen=True)
class NeighborGeometry:
    rel_pos: np.ndarray  # (N, K, 3) neighbour minus query
    dist: np.ndarray  # (N, K, 1)
    query_coords: np.ndarray  # (N, K, 3)
    neighbor_coords: np.ndarray  # (N, K, 3)

    def encoder_input(self):
        """``query || neighbour || relative position || distance``, shape (N, K, 10)."""
        return np.concatenate([self.query_coords, self.neighbor_coords, self.rel_pos, self.dist], axis=-1)


def knn(features, k: int) -> NeighborGraph:
    """Exact KNN graph of the rows of ``features`` (a Tensor or array of shape (N, D))."""
    X = features.data if isinstance(features, Tensor) else np.asarray(features)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"knn needs a non-empty (N, D) array, got shape {X.shape}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not np.all(np.isfinite(X)):
        raise ValueError("knn input contains non-finite values")
    return NeighborGraph(kernels.knn_indices(X, int(k)), int(k), X.shape[1])


def neighbor_geometry(coords, graph: NeighborGraph) -> NeighborGeometry:
    """Relative positions and distances of each neighbour to its query point.

    Coordinates are treated as constants: nothing here is differentiated.
    """
    P = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    idx = graph.indices
    if idx.shape[0] != P.shape[0]:
        raise ValueError(f"graph has {idx.shape[0]} rows but there are {P.shape[0]} points")
    if idx.min() < 0 or idx.max() >= P.shape[0]:
        raise IndexError(f"neighbour index out of range [0, {P.shape[0]})")
    nbr = P[idx]
    query = np.broadcast_to(P[:, None, :], nbr.shape)
    rel = nbr - query
    dist = np.sqrt((rel * rel).sum(axis=-1, keepdims=True))
    return NeighborGeometry(rel, dist, np.ascontiguousarray(query), nbr)
