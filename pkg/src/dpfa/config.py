"""Run configuration and its flat ``key = value`` file form.

Example::

    seed = 0
    task = seg
    k = 20
    widths = 64,64,64
    lambda = 0.2
    bf.mode = regularizer
    batch_size = 5
    epochs = 100
    lr = 0.001
    decay = 0.7
    data.root = runs/synthetic
    out_dir = runs/seg

Blank lines and ``#`` comments are ignored.  Keys are the ``CONFIG_KEYS``
below; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _ints(s):
    s = s.strip()
    return tuple(int(v) for v in s.split(",") if v.strip()) if s else ()


def _names(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "seg"  # seg | cls | bf
    # network
    k: int = 20
    widths: tuple = (64, 64, 64)
    emb_width: int = 1024
    head_widths: tuple = (512, 256)
    cls_hidden: tuple = (256,)
    pos_width: int | None = None
    attention_axis: str = "neighbors"
    standardize: bool = False
    head_dropout: float = 0.0
    dtype: str = "float32"
    # optimisation
    batch_size: int = 5
    epochs: int = 100
    lr: float = 1e-3
    decay: float = 0.7
    decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weighting: str = "none"  # none | inverse
    # background / foreground
    bf_mode: str = "off"  # off | regularizer | two_stage
    lam: float = 0.2
    bf_background: tuple = ("ceiling", "floor", "wall")
    bf_head_hidden: tuple = (64,)
    net1: str = ""  # two-stage network 1: "oracle", a checkpoint path, or empty to pre-train
    net1_epochs: int = 0  # 0 -> same as epochs
    # data
    data_root: str = ""
    train_split: str = "train"
    test_split: str = "test"
    block_size: float = 1.0
    samples: int = 4096
    min_points: int = 32
    # bookkeeping
    eval_every: int = 1
    out_dir: str = ""
    checkpoint_every: int = 1

    def validate(self):
        err = []
        if self.task not in ("seg", "cls", "bf"):
            err.append(f"task must be seg, cls or bf, got {self.task!r}")
        if self.k < 1:
            err.append(f"k must be >= 1, got {self.k}")
        if not self.widths or min(self.widths) < 1:
            err.append(f"widths must be positive, got {self.widths}")
        if self.batch_size < 1:
            err.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            err.append(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            err.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            err.append(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            err.append(f"decay_every must be >= 1, got {self.decay_every}")
        if self.bf_mode not in ("off", "regularizer", "two_stage"):
            err.append(f"bf.mode must be off, regularizer or two_stage, got {self.bf_mode!r}")
        if not 0 <= self.lam <= 1:
            err.append(f"lambda must lie in [0, 1], got {self.lam}")
        if self.class_weighting not in ("none", "inverse"):
            err.append(f"class_weighting must be none or inverse, got {self.class_weighting!r}")
        if self.attention_axis not in ("neighbors", "channels"):
            err.append(f"attention_axis must be neighbors or channels, got {self.attention_axis!r}")
        if self.block_size <= 0:
            err.append(f"block_size must be positive, got {self.block_size}")
        if self.samples < 1 or self.min_points < 0:
            err.append("samples must be >= 1 and min_points >= 0")
        if not 0 <= self.head_dropout < 1:
            err.append(f"head_dropout must lie in [0, 1), got {self.head_dropout}")
        if self.dtype not in ("float32", "float64"):
            err.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            err.append("eval_every and checkpoint_every must be >= 1")
        if self.task == "cls" and self.bf_mode != "off":
            err.append("background/foreground modes apply to segmentation only")
        if err:
            raise ConfigError("; ".join(err))
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}
        return cls(**kw).validate()


# file key -> (field, parser)
CONFIG_KEYS = {
    "seed": ("seed", int),
    "task": ("task", str.strip),
    "k": ("k", int),
    "widths": ("widths", _ints),
    "emb_width": ("emb_width", int),
    "head_widths": ("head_widths", _ints),
    "cls_hidden": ("cls_hidden", _ints),
    "pos_width": ("pos_width", _opt_int),
    "attention_axis": ("attention_axis", str.strip),
    "standardize": ("standardize", _bool),
    "head_dropout": ("head_dropout", float),
    "dtype": ("dtype", str.strip),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "decay": ("decay", float),
    "decay_every": ("decay_every", int),
    "adam.beta1": ("beta1", float),
    "adam.beta2": ("beta2", float),
    "adam.eps": ("eps", float),
    "class_weighting": ("class_weighting", str.strip),
    "bf.mode": ("bf_mode", str.strip),
    "lambda": ("lam", float),
    "bf.background": ("bf_background", _names),
    "bf.head_hidden": ("bf_head_hidden", _ints),
    "bf.net1": ("net1", str.strip),
    "bf.net1_epochs": ("net1_epochs", int),
    "data.root": ("data_root", str.strip),
    "data.train": ("train_split", str.strip),
    "data.test": ("test_split", str.strip),
    "data.block_size": ("block_size", float),
    "data.samples": ("samples", int),
    "data.min_points": ("min_points", int),
    "eval_every": ("eval_every", int),
    "checkpoint_every": ("checkpoint_every", int),
    "out_dir": ("out_dir", str.strip),
}


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    kw = {}
    for key, raw in parser["run"].items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, conv = CONFIG_KEYS[key]
        try:
            kw[name] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return dataclasses.replace(base or RunConfig(), **kw).validate()


def load_config(path, base=None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def dump_config(cfg: RunConfig) -> str:
    d = dataclasses.asdict(cfg)
    lines = []
    for key, (name, _) in CONFIG_KEYS.items():
        v = d[name]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "auto"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class SyntheticSpecFile:
    """Settings for ``gen-synthetic``; same flat format, keys listed in ``SYNTH_KEYS``."""

    seed: int = 0
    train: int = 40
    test: int = 10
    width: tuple = (1.5, 2.0)
    depth: tuple = (1.5, 2.0)
    height: tuple = (2.4, 2.8)
    boxes: int = 3
    cylinders: int = 1
    density: float = 400.0
    object_density: float = 1500.0
    color_noise: float = 0.06
    task: str = "seg"  # seg: rooms, cls: single objects
    points: int = 1024  # points per object when task = cls


def _floats2(s):
    v = [float(x) for x in s.split(",")]
    if len(v) == 1:
        v = v * 2
    if len(v) != 2:
        raise ValueError(f"expected 'lo,hi', got {s!r}")
    return tuple(v)


SYNTH_KEYS = {
    "seed": int, "train": int, "test": int, "width": _floats2, "depth": _floats2, "height": _floats2,
    "boxes": int, "cylinders": int, "density": float, "object_density": float, "color_noise": float,
    "task": str.strip, "points": int,
}


def parse_synthetic_spec(text) -> SyntheticSpecFile:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[spec]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed spec: {exc}") from None
    kw = {}
    for key, raw in parser["spec"].items():
        if key not in SYNTH_KEYS:
            raise ConfigError(f"unknown spec key {key!r}")
        try:
            kw[key] = SYNTH_KEYS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    out = SyntheticSpecFile(**kw)
    if out.task not in ("seg", "cls"):
        raise ConfigError(f"task must be seg or cls, got {out.task!r}")
    if out.train < 0 or out.test < 0:
        raise ConfigError("scene counts must be non-negative")
    return out
