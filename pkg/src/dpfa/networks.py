"""DPFA segmentation and classification networks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .fa_layer import FALayer, fa_forward
from .nn import MLP, Module
from .tensor import Tensor


class ConfigurationError(ValueError):
    pass


class _Backbone(Module):
    """Three (or more) stacked FA layers; layer 1 searches coordinates, later layers features."""

    def _build_fa(self, in_width, widths, rng, **kw):
        dims = [in_width, *widths]
        return [FALayer(dims[i], dims[i + 1], rng, **kw) for i in range(len(widths))]

    def _input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ConfigurationError(f"network expects (N, {self.in_width}) input, got {x.shape}")
        if x.shape[0] < 1:
            raise ConfigurationError("empty point cloud")
        if x.dtype != self.dtype:
            x = Tensor(x.data, dtype=self.dtype)
        return x

    def concat_features(self, x: Tensor, coord_graph=None):
        """``F1 || F2 || ...`` per point, plus the graphs that produced them.

        ``coord_graph`` may carry a cached KNN graph of the raw coordinates
        for the first layer.
        """
        coords = x.data[:, :3]
        h, search, g = x, coords, coord_graph
        outs, graphs = [], []
        for layer in self.fa:
            h, used = fa_forward(coords, h, layer, self.k, search=search, graph=g)
            search, g = h.data, None
            outs.append(h)
            graphs.append(used)
        return T.concat_axis(outs, axis=-1), graphs

    @property
    def dtype(self):
        return self.fa[0].dtype


class SegNet(_Backbone):
    """Per-point semantic segmentation network.

    ``embed`` produces the globally aware point embeddings
    ``F_cat || psi_emb(maxpool(F_cat))`` that both the segmentation head and
    an optional background/foreground head consume.
    """

    def __init__(
        self,
        in_width=9,
        num_classes=13,
        widths=(64, 64, 64),
        emb_width=1024,
        head_widths=(512, 256),
        k=20,
        pos_width=None,
        slope=0.2,
        attention_axis="neighbors",
        standardize=False,
        head_dropout=0.0,
        seed=0,
        dtype="float32",
    ):
        self.config = dict(
            kind="seg",
            in_width=int(in_width),
            num_classes=int(num_classes),
            widths=[int(w) for w in widths],
            emb_width=int(emb_width),
            head_widths=[int(w) for w in head_widths],
            k=int(k),
            pos_width=None if pos_width is None else int(pos_width),
            slope=float(slope),
            attention_axis=attention_axis,
            standardize=bool(standardize),
            head_dropout=float(head_dropout),
            seed=int(seed),
            dtype=str(np.dtype(dtype)),
        )
        dt = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.in_width, self.num_classes, self.k = int(in_width), int(num_classes), int(k)
        self.head_dropout = float(head_dropout)
        kw = dict(d_pos=pos_width, slope=slope, attention_axis=attention_axis, standardize=standardize, dtype=dt)
        self.fa = self._build_fa(self.in_width, widths, rng, **kw)
        d_cat = sum(widths)
        self.psi_emb = MLP([d_cat, emb_width], rng, slope, True, standardize, dt)
        self.head = MLP([emb_width + d_cat, *head_widths, num_classes], rng, slope, False, standardize, dt)

    @property
    def embed_width(self):
        return self.psi_emb.d_out + self.psi_emb.d_in

    def embed(self, x, coord_graph=None) -> Tensor:
        x = self._input(x)
        fcat, _ = self.concat_features(x, coord_graph)
        glob = self.psi_emb(T.reduce_max_axis(fcat, axis=0))
        return T.concat_axis([fcat, T.broadcast_rows(glob, x.shape[0])], axis=-1)

    def classify(self, emb: Tensor, rng=None) -> Tensor:
        if rng is not None and self.head_dropout > 0:
            emb = T.dropout(emb, self.head_dropout, rng)
        return self.head(emb)

    def __call__(self, x, rng=None, coord_graph=None) -> Tensor:
        return self.classify(self.embed(x, coord_graph), rng)


class ClsNet(_Backbone):
    """Whole-cloud classifier: ``softmax(psi_cls(maxpool(F_cat) + maxpool(psi_ccut(P))))``."""

    def __init__(
        self,
        in_width=3,
        num_classes=40,
        widths=(64, 128, 256),
        cls_hidden=(256,),
        k=20,
        pos_width=None,
        slope=0.2,
        attention_axis="neighbors",
        standardize=False,
        seed=0,
        dtype="float32",
    ):
        self.config = dict(
            kind="cls",
            in_width=int(in_width),
            num_classes=int(num_classes),
            widths=[int(w) for w in widths],
            cls_hidden=[int(w) for w in cls_hidden],
            k=int(k),
            pos_width=None if pos_width is None else int(pos_width),
            slope=float(slope),
            attention_axis=attention_axis,
            standardize=bool(standardize),
            seed=int(seed),
            dtype=str(np.dtype(dtype)),
        )
        dt = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.in_width, self.num_classes, self.k = int(in_width), int(num_classes), int(k)
        kw = dict(d_pos=pos_width, slope=slope, attention_axis=attention_axis, standardize=standardize, dtype=dt)
        self.fa = self._build_fa(self.in_width, widths, rng, **kw)
        d_pool = sum(widths)
        self.psi_ccut = MLP([self.in_width, d_pool], rng, slope, False, False, dt)
        self.psi_cls = MLP([d_pool, *cls_hidden, num_classes], rng, slope, False, standardize, dt)

    def logits(self, x, coord_graph=None) -> Tensor:
        x = self._input(x)
        fcat, _ = self.concat_features(x, coord_graph)
        pooled = T.add(T.reduce_max_axis(fcat, axis=0), T.reduce_max_axis(self.psi_ccut(x), axis=0))
        return self.psi_cls(pooled)

    def __call__(self, x) -> Tensor:
        return T.softmax_axis(self.logits(x), axis=0)


def seg_forward(block, net: SegNet, rng=None) -> Tensor:
    """Per-point logits (N, C) for a block (array, Tensor or PointCloudBlock)."""
    return net(getattr(block, "features", block), rng)


def cls_forward(cloud, net: ClsNet) -> Tensor:
    """Class probabilities (C,) for one cloud."""
    return net(getattr(cloud, "features", cloud))


def build_network(config: dict):
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "seg":
        return SegNet(**cfg)
    if kind == "cls":
        return ClsNet(**cfg)
    raise ConfigurationError(f"unknown network kind {kind!r}")
