"""Background/foreground exploitation.

Two strategies share one label map (background -> 0, foreground -> 1):

* two-stage: a frozen binary segmenter (network 1) labels every point; its
  hard decision, one-hot encoded, is appended to the input features of a
  second segmentation network;
* regulariser: a binary head on the shared per-point embedding adds a
  weighted binary loss, ``(1 - lam) * L_seg + lam * L_bf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import SegNet
from .nn import MLP, Module
from .tensor import Tensor

MODES = ("off", "regularizer", "two_stage")
DEFAULT_BACKGROUND = ("ceiling", "floor", "wall")


@dataclass(frozen=True)
class BFConfig:
    background_classes: frozenset
    num_classes: int
    lam: float = 0.2
    mode: str = "regularizer"

    def __post_init__(self):
        bg = frozenset(int(c) for c in self.background_classes)
        object.__setattr__(self, "background_classes", bg)
        if self.mode not in MODES:
            raise ValueError(f"bf mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not bg:
            raise ValueError("background class set is empty")
        if any(c < 0 or c >= self.num_classes for c in bg):
            raise ValueError(f"background ids {sorted(bg)} outside [0, {self.num_classes})")
        if len(bg) >= self.num_classes:
            raise ValueError("every class is background; no foreground left")

    @classmethod
    def from_names(cls, names, class_table, lam=0.2, mode="regularizer"):
        table = list(class_table)
        unknown = [n for n in names if n not in table]
        if unknown:
            raise ValueError(f"unknown background classes {unknown}; table is {table}")
        return cls(frozenset(table.index(n) for n in names), len(table), lam, mode)

    def lookup(self):
        """Array mapping class id -> 0 (background) or 1 (foreground)."""
        out = np.ones(self.num_classes, dtype=np.int64)
        out[list(self.background_classes)] = 0
        return out


def bf_label_map(labels, cfg: BFConfig) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"class ids must lie in [0, {cfg.num_classes}), got [{labels.min()}, {labels.max()}]")
    return cfg.lookup()[labels]


def one_hot(ids, width=2, dtype=np.float32):
    out = np.zeros((len(ids), width), dtype=dtype)
    out[np.arange(len(ids)), ids] = 1
    return out


# ---------------------------------------------------------------------------
# regulariser
# ---------------------------------------------------------------------------


class BFHead(Module):
    """Per-point binary classifier on the shared embedding."""

    def __init__(self, d_in, rng, hidden=(64,), slope=0.2, dtype=np.float32):
        self.mlp = MLP([d_in, *hidden, 2], rng, slope, False, False, np.dtype(dtype))

    def __call__(self, emb):
        return self.mlp(emb)


class BFRegNet(Module):
    """A segmentation network with an auxiliary background/foreground head.

    With ``mode="off"`` the head is never evaluated and the output equals the
    plain segmentation network's.
    """

    def __init__(self, seg: SegNet, cfg: BFConfig, head_hidden=(64,), seed=None):
        self.seg = seg
        self.cfg = cfg
        rng = np.random.default_rng(seg.config["seed"] + 7919 if seed is None else seed)
        self.bf_head = BFHead(seg.embed_width, rng, head_hidden, seg.config["slope"], seg.dtype)
        self.head_hidden = tuple(head_hidden)

    def forward_both(self, x, rng=None, coord_graph=None):
        emb = self.seg.embed(x, coord_graph)
        seg_logits = self.seg.classify(emb, rng)
        if self.cfg.mode == "off":
            return seg_logits, None
        return seg_logits, self.bf_head(emb)

    def __call__(self, x, rng=None, coord_graph=None):
        return self.forward_both(x, rng, coord_graph)[0]


def bf_regularized_loss(seg_logits: Tensor, bf_logits: Tensor, labels, cfg: BFConfig, weights=None) -> Tensor:
    """``(1 - lam) * CE(seg_logits, labels) + lam * CE(bf_logits, bf(labels))``."""
    lam = cfg.lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    labels = np.asarray(labels, dtype=np.int64)
    # endpoints skip the unused branch so they are exact
    if lam == 0.0:
        return T.cross_entropy(seg_logits, labels, weights)
    l_bf = T.cross_entropy(bf_logits, bf_label_map(labels, cfg))
    if lam == 1.0:
        return l_bf
    l_seg = T.cross_entropy(seg_logits, labels, weights)
    return T.add(T.scale(l_seg, 1.0 - lam), T.scale(l_bf, lam))


def combine_losses(l_seg: float, l_bf: float, lam: float) -> float:
    """Scalar form of the mixed loss, for reporting."""
    return (1.0 - lam) * l_seg + lam * l_bf


# ---------------------------------------------------------------------------
# two-stage
# ---------------------------------------------------------------------------


class GroundTruthBF:
    """Stand-in for network 1 that reads background/foreground from the true labels."""

    def __init__(self, cfg: BFConfig):
        self.cfg = cfg

    def predict(self, features, labels):
        if labels is None:
            raise ValueError("the ground-truth oracle needs labels")
        return bf_label_map(labels, self.cfg)


def bf_predict(net1, features, labels=None, coord_graph=None) -> np.ndarray:
    """Hard background/foreground decision of network 1 (no gradient is recorded)."""
    if isinstance(net1, GroundTruthBF):
        return net1.predict(features, labels)
    with T.no_grad():
        logits = net1(features, coord_graph=coord_graph)
    if logits.shape[-1] != 2:
        raise ValueError(f"network 1 must output 2 logits per point, got {logits.shape}")
    return logits.data.argmax(axis=1)


def two_stage_input(features, net1, labels=None, coord_graph=None) -> np.ndarray:
    """Input features with network 1's one-hot decision appended (background -> [1, 0])."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    ids = bf_predict(net1, x, labels, coord_graph)
    return np.concatenate([x, one_hot(ids, 2, x.dtype)], axis=1)


def two_stage_forward(features, net1, net2: SegNet, labels=None, rng=None, coord_graph=None) -> Tensor:
    aug = two_stage_input(features, net1, labels, coord_graph)
    if aug.shape[1] != net2.in_width:
        raise ValueError(f"network 2 expects {net2.in_width} input channels, augmented input has {aug.shape[1]}")
    return net2(aug, rng, coord_graph)
