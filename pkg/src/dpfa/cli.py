"""Command-line interface: ``dpfa <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .bf import BFConfig, GroundTruthBF, two_stage_input
from .config import ConfigError, RunConfig, load_config, parse_config, parse_synthetic_spec
from .data import (
    LabeledCloud,
    SceneSpec,
    cover_blocks,
    load_cloud,
    save_cloud,
    save_split,
    synthesize_dataset,
    synthesize_objects,
)
from .kernels import BACKEND
from .knn_graph import knn
from .metrics import MetricsReport, latency_stats
from .train import (
    BF_TABLE,
    bf_blockset,
    bf_config,
    build_model,
    evaluate,
    load_datasets,
    load_model,
    logits_of,
    run,
    two_stage_blockset,
)

log = logging.getLogger("dpfa")


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip()] = val.strip()
    if over:
        cfg = parse_config("".join(f"{k} = {v}\n" for k, v in over.items()), base=cfg)
    return cfg


def _print_report(report: MetricsReport, prefix=""):
    print(report.table())
    for line in report.kv_lines(prefix):
        print(line)


def cmd_gen_synthetic(args):
    spec = parse_synthetic_spec(Path(args.spec).read_text())
    out = Path(args.out)
    if spec.task == "cls":
        save_split(out, "train", synthesize_objects([spec.seed, 0], spec.train, spec.points), "object")
        save_split(out, "test", synthesize_objects([spec.seed, 1], spec.test, spec.points), "object")
    else:
        scene = SceneSpec(seed=spec.seed, width=spec.width, depth=spec.depth, height=spec.height, boxes=spec.boxes,
                          cylinders=spec.cylinders, density=spec.density, object_density=spec.object_density,
                          color_noise=spec.color_noise)
        save_split(out, "train", synthesize_dataset(scene, spec.train))
        save_split(out, "test", synthesize_dataset(scene, spec.test, offset=spec.train))
    print(f"wrote {spec.train} train / {spec.test} test clouds to {out}")


def _train_common(cfg: RunConfig, args):
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    t0 = time.perf_counter()
    res = run(cfg, resume=args.resume)
    print(f"trained {len(res.losses)} epochs in {time.perf_counter() - t0:.1f} s")
    if res.best is not None:
        print(f"best epoch {res.best_epoch}")
        _print_report(res.best, "best.")
    return res


def cmd_train_seg(args):
    cfg = _load_cfg(args)
    return _train_common(cfg.replace(task="seg"), args)


def cmd_train_cls(args):
    cfg = _load_cfg(args)
    return _train_common(cfg.replace(task="cls", bf_mode="off"), args)


def cmd_bf_pretrain(args):
    cfg = _load_cfg(args)
    return _train_common(cfg.replace(task="bf", bf_mode="off"), args)


def model_k(model):
    return model.seg.k if hasattr(model, "seg") else model.k


def _is_two_stage(ck):
    net = ck.model_config["net"]
    return net["kind"] == "seg" and net["in_width"] == 11


def _net1(cfg: RunConfig, args, class_table):
    """Network 1 of a two-stage model: the label oracle or a saved network."""
    name = args.net1 or cfg.net1 or "oracle"
    if name == "oracle":
        return GroundTruthBF(BFConfig.from_names(cfg.bf_background, class_table, mode="two_stage"))
    return load_model(name)[0]


def cmd_eval(args):
    cfg = _load_cfg(args)
    model, ck = load_model(args.checkpoint)
    if ck.model_config["net"]["kind"] == "cls":
        cfg = cfg.replace(task="cls", bf_mode="off")
    _, test_set = load_datasets(cfg.replace(k=model_k(model)))
    if model.class_table == BF_TABLE:
        test_set = bf_blockset(test_set, bf_config(cfg, test_set.class_table))
    elif _is_two_stage(ck):
        test_set = two_stage_blockset(test_set, _net1(cfg, args, test_set.class_table))
    _print_report(evaluate(model, test_set))


def cmd_predict(args):
    model, ck = load_model(args.checkpoint)
    if ck.model_config["net"]["kind"] != "seg":
        raise ConfigError("predict writes per-point labels and needs a segmentation checkpoint")
    cfg = _load_cfg(args)
    cloud = load_cloud(args.input)
    table = model.class_table or cloud.class_table
    if model.class_table is not None and model.class_table != BF_TABLE and model.class_table != cloud.class_table:
        raise ConfigError(f"input classes {cloud.class_table} differ from the model's {model.class_table}")
    k = model_k(model)
    net1 = _net1(cfg, args, cloud.class_table) if _is_two_stage(ck) else None
    votes = np.zeros((len(cloud), len(table)))
    blocks = cover_blocks(cloud, cfg.block_size, cfg.samples, np.random.default_rng(cfg.seed), np.dtype(cfg.dtype))
    with T.no_grad():
        for b in blocks:
            g = knn(b.features[:, :3], k)
            x = b.features
            if net1 is not None:
                x = two_stage_input(x, net1, b.labels, g)
            logits = logits_of(model, x, g).data
            np.add.at(votes, b.indices, logits)
    pred = votes.argmax(axis=1)
    save_cloud(LabeledCloud(cloud.coords, cloud.colors, pred, table), args.output)
    print(f"wrote {len(pred)} labelled points to {args.output}")


def cmd_bench(args):
    cfg = _load_cfg(args)
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
    else:
        table = [f"c{i}" for i in range(args.classes)]
        in_width = 3 if cfg.task == "cls" else 9
        model = build_model(cfg.replace(task="cls" if cfg.task == "cls" else "seg"), in_width, table)
    net = model.seg if hasattr(model, "seg") else model
    n = args.points or cfg.samples
    x = np.random.default_rng(cfg.seed).random((n, net.in_width)).astype(net.dtype)
    seconds = []
    with T.no_grad():
        for i in range(args.warmup + args.runs):
            t0 = time.perf_counter()
            logits_of(model, x, None)
            if i >= args.warmup:
                seconds.append(time.perf_counter() - t0)
    stats = latency_stats(seconds)
    print(f"per-block forward latency ({n} points, backend {BACKEND}, {args.runs} warm runs)")
    print(f"  median {stats['median_ms']:.2f} ms   mean {stats['mean_ms']:.2f} ms   p95 {stats['p95_ms']:.2f} ms")
    print(f"latency.points={n}")
    print(f"latency.backend={BACKEND}")
    for k, v in stats.items():
        print(f"latency.{k}={v:.6f}" if isinstance(v, float) else f"latency.{k}={v}")
    return stats


def build_parser():
    p = argparse.ArgumentParser(prog="dpfa", description="Dynamic point feature aggregation networks")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="generator settings (key = value)")
    g.add_argument("--out", required=True, help="dataset root")
    g.set_defaults(func=cmd_gen_synthetic)

    for name, func, text in (("train-seg", cmd_train_seg, "train a segmentation network"),
                             ("train-cls", cmd_train_cls, "train a classification network"),
                             ("bf-pretrain", cmd_bf_pretrain, "train network 1 (background/foreground)")):
        t = with_config(sub.add_parser(name, help=text))
        t.add_argument("--out", help="output directory (overrides out_dir)")
        t.add_argument("--resume", help="continue from a last.npz checkpoint")
        t.set_defaults(func=func)

    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    e.add_argument("checkpoint")
    e.add_argument("--net1", help="network 1 for two-stage checkpoints: 'oracle' or a checkpoint path")
    e.set_defaults(func=cmd_eval)

    pr = with_config(sub.add_parser("predict", help="label every point of a cloud file"))
    pr.add_argument("checkpoint")
    pr.add_argument("input")
    pr.add_argument("output")
    pr.add_argument("--net1", help="network 1 for two-stage checkpoints")
    pr.set_defaults(func=cmd_predict)

    b = with_config(sub.add_parser("bench", help="per-block forward latency"))
    b.add_argument("--checkpoint", help="benchmark a trained model instead of a fresh one")
    b.add_argument("--points", type=int, default=0, help="points per block (default: config samples)")
    b.add_argument("--classes", type=int, default=13)
    b.add_argument("--runs", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
