"""Experiment driver: datasets of blocks, the training loop and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bf import BFConfig, BFRegNet, GroundTruthBF, bf_label_map, bf_regularized_loss, two_stage_input
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import LabeledCloud, load_split, split_blocks
from .knn_graph import knn
from .metrics import MetricsReport, confusion_matrix, cross_check
from .networks import ClsNet, build_network
from .optim import OptimizerState, adam_step, lr_at

log = logging.getLogger("dpfa")

BF_TABLE = ["background", "foreground"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class BlockSet:
    """Network inputs with their labels.

    For segmentation ``labels[i]`` holds one id per point; for
    classification a single id per cloud.  ``graphs[i]`` optionally caches
    the coordinate KNN graph of input ``i`` (it never changes during
    training).
    """

    inputs: list
    labels: list
    class_table: list
    graphs: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} label arrays")
        if not self.graphs:
            self.graphs = [None] * len(self.inputs)

    def __len__(self):
        return len(self.inputs)

    def with_graphs(self, k):
        graphs = [knn(x[:, :3], k) for x in self.inputs]
        return BlockSet(self.inputs, self.labels, self.class_table, graphs)

    def relabel(self, labels, class_table):
        return BlockSet(self.inputs, labels, list(class_table), self.graphs)


def _check_tables(clouds):
    tables = {tuple(c.class_table) for c in clouds}
    if len(tables) > 1:
        raise ValueError(f"clouds disagree on the class table: {sorted(tables)}")
    return list(tables.pop()) if tables else []


def blocks_from_clouds(clouds: list[LabeledCloud], cfg: RunConfig, rng=None) -> BlockSet:
    rng = np.random.default_rng(rng)
    table = _check_tables(clouds)
    inputs, labels = [], []
    for c in clouds:
        for b in split_blocks(c, cfg.block_size, cfg.samples, cfg.min_points, rng, dtype=np.dtype(cfg.dtype)):
            inputs.append(b.features)
            labels.append(b.labels)
    return BlockSet(inputs, labels, table)


def objects_from_clouds(clouds: list[LabeledCloud], cfg: RunConfig) -> BlockSet:
    """One input per cloud (coordinates only), labelled by its majority class."""
    table = _check_tables(clouds)
    inputs = [c.coords.astype(cfg.dtype) for c in clouds]
    labels = [np.array([np.bincount(c.labels).argmax()]) for c in clouds]
    return BlockSet(inputs, labels, table)


def bf_blockset(data: BlockSet, bf_cfg: BFConfig) -> BlockSet:
    return data.relabel([bf_label_map(y, bf_cfg) for y in data.labels], BF_TABLE)


def two_stage_blockset(data: BlockSet, net1) -> BlockSet:
    """Inputs with network 1's one-hot background/foreground decision appended."""
    inputs = [two_stage_input(x, net1, y, g) for x, y, g in zip(data.inputs, data.labels, data.graphs)]
    return BlockSet(inputs, data.labels, data.class_table, data.graphs)


def bf_config(cfg: RunConfig, class_table) -> BFConfig:
    mode = cfg.bf_mode if cfg.task == "seg" else "off"
    return BFConfig.from_names(cfg.bf_background, class_table, cfg.lam, mode)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def network_config(cfg: RunConfig, in_width, num_classes):
    common = dict(in_width=in_width, num_classes=num_classes, widths=list(cfg.widths), k=cfg.k,
                  pos_width=cfg.pos_width, attention_axis=cfg.attention_axis, standardize=cfg.standardize,
                  seed=cfg.seed, dtype=cfg.dtype)
    if cfg.task == "cls":
        return dict(kind="cls", cls_hidden=list(cfg.cls_hidden), **common)
    return dict(kind="seg", emb_width=cfg.emb_width, head_widths=list(cfg.head_widths),
                head_dropout=cfg.head_dropout, **common)


def build_model(cfg: RunConfig, in_width, class_table):
    net = build_network(network_config(cfg, in_width, len(class_table)))
    if cfg.task == "seg" and cfg.bf_mode == "regularizer":
        net = BFRegNet(net, bf_config(cfg, class_table), cfg.bf_head_hidden)
    net.class_table = list(class_table)
    return net


def model_description(model):
    """JSON-able description from which :func:`model_from_description` rebuilds the model."""
    if isinstance(model, BFRegNet):
        cfg = model.cfg
        return dict(net=model.seg.config, class_table=model.class_table, head_hidden=list(model.head_hidden),
                    bf=dict(background=sorted(cfg.background_classes), lam=cfg.lam, mode=cfg.mode))
    return dict(net=model.config, class_table=getattr(model, "class_table", None))


def model_from_description(desc):
    net = build_network(desc["net"])
    table = desc.get("class_table")
    if desc.get("bf"):
        b = desc["bf"]
        cfg = BFConfig(frozenset(b["background"]), net.num_classes, b["lam"], b["mode"])
        net = BFRegNet(net, cfg, desc["head_hidden"])
    net.class_table = table
    return net


def load_model(path):
    ck = load_checkpoint(path)
    if not ck.model_config:
        raise CheckpointError(f"{path}: checkpoint carries no model description")
    model = model_from_description(ck.model_config)
    ck.load_into(model)
    return model, ck


def logits_of(model, x, graph=None, rng=None):
    """Per-point logits (N, C) for segmentation models, (1, C) for classifiers."""
    if isinstance(model, ClsNet):
        return T.reshape(model.logits(x, coord_graph=graph), (1, model.num_classes))
    return model(x, rng, graph)


def _num_classes(model):
    return model.seg.num_classes if isinstance(model, BFRegNet) else model.num_classes


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model, data: BlockSet, check=True) -> MetricsReport:
    """Accumulate a confusion matrix over every input and time each forward pass."""
    C = _num_classes(model)
    if len(data.class_table) != C:
        raise ValueError(f"model predicts {C} classes, dataset has {len(data.class_table)}")
    table = getattr(model, "class_table", None)
    if table is not None and list(table) != list(data.class_table):
        raise ValueError(f"class table mismatch: model {list(table)}, dataset {list(data.class_table)}")
    conf = np.zeros((C, C), dtype=np.int64)
    seconds, ys, ps = [], [], []
    with T.no_grad():
        for x, y, g in zip(data.inputs, data.labels, data.graphs):
            t0 = time.perf_counter()
            pred = logits_of(model, x, g).data.argmax(axis=1)
            seconds.append(time.perf_counter() - t0)
            conf += confusion_matrix(y, pred, C)
            ys.append(np.asarray(y).reshape(-1))
            ps.append(pred)
    report = MetricsReport.from_confusion(conf, data.class_table, seconds)
    if check and ys:
        cross_check(report, np.concatenate(ys), np.concatenate(ps))
    return report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def class_weights(data: BlockSet, num_classes):
    """Inverse-frequency weights normalised to mean 1 over the classes present."""
    counts = np.bincount(np.concatenate([np.asarray(y).reshape(-1) for y in data.labels]), minlength=num_classes)
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def block_loss(model, x, y, graph=None, weights=None, rng=None):
    if isinstance(model, BFRegNet) and model.cfg.mode == "regularizer":
        seg_logits, bf_logits = model.forward_both(x, rng, graph)
        return bf_regularized_loss(seg_logits, bf_logits, y, model.cfg, weights)
    return T.cross_entropy(logits_of(model, x, graph, rng), y, weights)


@dataclass
class TrainResult:
    model: object
    history: list  # (epoch, MetricsReport)
    losses: list  # mean training loss per epoch
    best: MetricsReport | None
    best_epoch: int
    best_state: dict

    @property
    def final(self):
        return self.history[-1][1] if self.history else None


def _rng_state(g):
    return g.bit_generator.state


def _set_rng_state(g, state):
    g.bit_generator.state = state


def train(cfg: RunConfig, train_set: BlockSet, test_set: BlockSet | None = None, model=None, resume=None,
          stop_after_epoch=None, out_dir=None) -> TrainResult:
    """Mini-batch Adam training with periodic evaluation.

    A mini-batch of ``batch_size`` inputs is processed one input at a time
    with gradients accumulated, which equals the batched gradient because
    every input is normalised independently.  With ``out_dir`` the latest
    state goes to ``last.npz`` (resumable) and the best-by-mIoU model to
    ``best.npz``.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if model is None:
        model = build_model(cfg, train_set.inputs[0].shape[1], train_set.class_table)
    params = model.parameters()
    state = OptimizerState(lr=cfg.lr, decay=cfg.decay, decay_every=cfg.decay_every,
                           beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    order_rng = np.random.default_rng([cfg.seed, 11])
    drop_rng = np.random.default_rng([cfg.seed, 12])
    history, losses = [], []
    best, best_epoch, best_state = None, -1, {}
    start = 0
    out = Path(out_dir) if out_dir else None
    desc = model_description(model)

    if resume is not None:
        ck = load_checkpoint(resume)
        ck.load_into(model)
        state = ck.state
        start = ck.epoch
        _set_rng_state(order_rng, ck.rng_states["order"])
        _set_rng_state(drop_rng, ck.rng_states["dropout"])
        losses = list(ck.extra.get("losses", []))
        history = [(e, MetricsReport.from_confusion(np.array(c), test_set.class_table)) for e, c in ck.extra.get("history", [])]
        best_epoch = ck.extra.get("best_epoch", -1)
        if best_epoch >= 0:
            best = dict(history)[best_epoch]
            best_state = {k[len("best/"):]: v for k, v in ck.params.items() if k.startswith("best/")} or model.state_arrays()

    C = _num_classes(model)
    weights = class_weights(train_set, C) if cfg.class_weighting == "inverse" else None
    n = len(train_set)
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, state)
        perm = order_rng.permutation(n)
        epoch_loss = []
        for step, s in enumerate(range(0, n, cfg.batch_size)):
            batch = perm[s : s + cfg.batch_size]
            model.zero_grad()
            for i in batch:
                g = T.Graph()
                with g:
                    loss = block_loss(model, train_set.inputs[i], train_set.labels[i], train_set.graphs[i],
                                      weights, drop_rng if cfg.head_dropout > 0 else None)
                    scaled = T.scale(loss, 1.0 / len(batch))
                value = float(loss.item())
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
                g.backward(scaled)
                epoch_loss.append(value)
            try:
                adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch} step {step}") from None
        losses.append(float(np.mean(epoch_loss)))
        done = epoch + 1
        if test_set is not None and len(test_set) and (done % cfg.eval_every == 0 or done == cfg.epochs):
            report = evaluate(model, test_set)
            history.append((done, report))
            log.info("epoch %d loss %.4f OA %.4f mIoU %.4f", done, losses[-1], report.oa, report.miou)
            if best is None or report.miou > best.miou:
                best, best_epoch, best_state = report, done, model.state_arrays()
                if out is not None:
                    save_checkpoint(out / "best.npz", best_state, None, done, desc, extra=dict(metrics=report.to_dict()))
        else:
            log.info("epoch %d loss %.4f", done, losses[-1])
        if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            arrays = dict(params)
            arrays.update({f"best/{k}": v for k, v in best_state.items()})
            save_checkpoint(
                out / "last.npz", arrays, state, done, desc,
                rng_states=dict(order=_rng_state(order_rng), dropout=_rng_state(drop_rng)),
                extra=dict(losses=losses, history=[(e, r.confusion.tolist()) for e, r in history], best_epoch=best_epoch),
            )
        if stop_after_epoch is not None and done >= stop_after_epoch:
            break
    if not best_state:
        best_state = model.state_arrays()
    return TrainResult(model, history, losses, best, best_epoch, best_state)


def restore_best(result: TrainResult):
    result.model.load_arrays(result.best_state)
    return result.model


def fit_block(model, x, y, steps, lr=1e-3, graph=None):
    """Plain Adam on a single input; returns the loss before every step."""
    params = model.parameters()
    state = OptimizerState(lr=lr)
    trace = []
    for _ in range(steps):
        model.zero_grad()
        g = T.Graph()
        with g:
            loss = block_loss(model, x, y, graph)
        trace.append(float(loss.item()))
        g.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state)
    return trace


# ---------------------------------------------------------------------------
# config-driven entry points
# ---------------------------------------------------------------------------


def load_datasets(cfg: RunConfig):
    """Train/test ``BlockSet``s from ``cfg.data_root``, with cached coordinate graphs."""
    if not cfg.data_root:
        raise ConfigError("data.root is not set")
    tr = load_split(cfg.data_root, cfg.train_split)
    te = load_split(cfg.data_root, cfg.test_split)
    if _check_tables(tr) != _check_tables(te) and te:
        raise ValueError("train and test splits disagree on the class table")
    if cfg.task == "cls":
        return objects_from_clouds(tr, cfg).with_graphs(cfg.k), objects_from_clouds(te, cfg).with_graphs(cfg.k)
    train_set = blocks_from_clouds(tr, cfg, np.random.default_rng([cfg.seed, 1])).with_graphs(cfg.k)
    test_set = blocks_from_clouds(te, cfg, np.random.default_rng([cfg.seed, 2])).with_graphs(cfg.k)
    return train_set, test_set


def resolve_net1(cfg: RunConfig, train_set: BlockSet, test_set: BlockSet, out_dir=None):
    """Network 1 for two-stage runs: the label oracle, a saved model, or a freshly pre-trained one."""
    bcfg = bf_config(cfg, train_set.class_table)
    if cfg.net1 == "oracle":
        return GroundTruthBF(bcfg)
    if cfg.net1:
        net1, _ = load_model(cfg.net1)
        return net1
    res = pretrain_bf(cfg, train_set, test_set, out_dir=Path(out_dir) / "net1" if out_dir else None)
    return restore_best(res)


def pretrain_bf(cfg: RunConfig, train_set: BlockSet, test_set: BlockSet | None, out_dir=None) -> TrainResult:
    """Train a binary background/foreground segmenter (network 1)."""
    bcfg = bf_config(cfg, train_set.class_table)
    net_cfg = cfg.replace(task="seg", bf_mode="off", epochs=cfg.net1_epochs or cfg.epochs)
    model = build_network(network_config(net_cfg, train_set.inputs[0].shape[1], 2))
    model.class_table = list(BF_TABLE)
    te = bf_blockset(test_set, bcfg) if test_set is not None else None
    return train(net_cfg, bf_blockset(train_set, bcfg), te, model=model, out_dir=out_dir)


def run(cfg: RunConfig, train_set=None, test_set=None, resume=None, out_dir=None) -> TrainResult:
    """Full experiment for ``cfg``: loads data if not given, handles the two-stage pre-training."""
    cfg.validate()
    out_dir = out_dir or (cfg.out_dir or None)
    if train_set is None:
        train_set, test_set = load_datasets(cfg)
    if cfg.task == "bf":
        return pretrain_bf(cfg, train_set, test_set, out_dir)
    if cfg.task == "seg" and cfg.bf_mode == "two_stage":
        net1 = resolve_net1(cfg, train_set, test_set, out_dir)
        train_set = two_stage_blockset(train_set, net1)
        test_set = two_stage_blockset(test_set, net1) if test_set is not None else None
    return train(cfg, train_set, test_set, resume=resume, out_dir=out_dir)
