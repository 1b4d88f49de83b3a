"""Feature Aggregation layer.

Per point ``i`` and neighbour slot ``j``::

    c_ij = psi_pos(p_i || p_j || (p_j - p_i) || |p_j - p_i|)     positional encoding
    e_ij = f_i || f_j                                           feature encoding
    Q_ij = c_ij || e_ij
    R    = psi_att(Q)                                           (N, K, D_out)
    F'_i = sum_j R_ij * softmax_j(R_i)_j                        attentive pooling
    F    = F' + psi_cut(f)                                      shortcut

Slot ``j = 0`` is the query itself.  Neighbour indices come from a KNN
search that the caller points at raw coordinates (first layer) or at the
previous layer's output features.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .knn_graph import NeighborGeometry, NeighborGraph, knn, neighbor_geometry
from .nn import MLP, Module
from .tensor import Tensor

POS_INPUT_WIDTH = 10
ATTENTION_AXES = ("neighbors", "channels")


class FALayer(Module):
    def __init__(
        self,
        d_in,
        d_out,
        rng,
        d_pos=None,
        pos_hidden=(),
        slope=0.2,
        attention_axis="neighbors",
        standardize=False,
        dtype=np.float32,
    ):
        if attention_axis not in ATTENTION_AXES:
            raise ValueError(f"attention_axis must be one of {ATTENTION_AXES}, got {attention_axis!r}")
        d_pos = d_out if d_pos is None else d_pos
        self.d_in, self.d_out, self.d_pos = d_in, d_out, d_pos
        self.attention_axis = attention_axis
        self.psi_pos = MLP([POS_INPUT_WIDTH, *pos_hidden, d_pos], rng, slope, True, standardize, dtype)
        self.psi_att = MLP([d_pos + 2 * d_in, d_out], rng, slope, False, False, dtype)
        self.psi_cut = MLP([d_in, d_out], rng, slope, False, False, dtype)

    @property
    def d_encoded(self):
        return self.d_pos + 2 * self.d_in

    @property
    def dtype(self):
        return self.psi_att.layers[0].W.dtype


def positional_encode(geom: NeighborGeometry, layer: FALayer) -> Tensor:
    x = Tensor(geom.encoder_input(), dtype=layer.dtype)
    return layer.psi_pos(x)


def feature_encode(features: Tensor, graph: NeighborGraph) -> Tensor:
    """``e_ij = f_i || f_j`` with shape (N, K, 2 D_in)."""
    n, k = graph.indices.shape
    if features.shape[0] != n:
        raise T.DimensionError(f"graph has {n} rows, features {features.shape}")
    self_idx = np.broadcast_to(np.arange(n)[:, None], (n, k))
    return T.concat_axis([T.gather_rows(features, self_idx), T.gather_rows(features, graph.indices)], axis=-1)


def encode_neighbors(geom: NeighborGeometry, features: Tensor, graph: NeighborGraph, layer: FALayer) -> Tensor:
    if features.shape[-1] != layer.d_in:
        raise T.DimensionError(f"layer expects {layer.d_in} input channels, got {features.shape}")
    return T.concat_axis([positional_encode(geom, layer), feature_encode(features, graph)], axis=-1)


def attention_pool(Q: Tensor, layer: FALayer, return_weights=False):
    """Score every neighbour slot per channel and sum the weighted scores over slots."""
    R = layer.psi_att(Q)
    axis = 1 if layer.attention_axis == "neighbors" else 2
    weights = T.softmax_axis(R, axis=axis)
    pooled = T.reduce_sum_axis(T.hadamard(R, weights), axis=1)
    return (pooled, weights) if return_weights else pooled


def fa_forward(coords, features: Tensor, layer: FALayer, k: int, search=None, graph=None):
    """Run one FA layer.

    ``search`` is the array the KNN runs in; it defaults to ``features``.
    A precomputed ``graph`` skips the search.  Returns ``(F, graph)``.
    """
    coords = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    features = features if isinstance(features, Tensor) else Tensor(features, dtype=layer.dtype)
    if graph is None:
        graph = knn(features.data if search is None else search, k)
    geom = neighbor_geometry(coords, graph)
    pooled = attention_pool(encode_neighbors(geom, features, graph, layer), layer)
    return T.add(pooled, layer.psi_cut(features)), graph
