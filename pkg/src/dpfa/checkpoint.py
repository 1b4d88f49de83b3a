"""Versioned ``.npz`` checkpoints.

Arrays are stored under ``param/<name>``, ``adam_m/<name>`` and
``adam_v/<name>``; everything else (model config, optimizer scalars, epoch,
RNG states, free-form extras) lives in a JSON document stored as the
``meta`` byte array.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .optim import OptimizerState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, state: OptimizerState | None = None, epoch=0, model_config=None,
                    rng_states=None, extra=None):
    """Write a checkpoint; ``params`` maps names to arrays or Tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    if state is not None:
        arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    meta = dict(
        version=FORMAT_VERSION,
        epoch=int(epoch),
        model_config=model_config,
        optimizer=None if state is None else state.scalars(),
        rng_states=rng_states or {},
        extra=extra or {},
    )
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


class Checkpoint:
    def __init__(self, params, state, epoch, model_config, rng_states, extra):
        self.params = params
        self.state = state
        self.epoch = epoch
        self.model_config = model_config
        self.rng_states = rng_states
        self.extra = extra

    def load_into(self, model):
        """Copy parameters into ``model``; shape mismatches name the offending tensor."""
        try:
            model.load_arrays(self.params)
        except (ValueError, KeyError) as exc:
            raise CheckpointError(str(exc).strip("\"'")) from None
        return model


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from None
    if "meta" not in data:
        raise CheckpointError(f"{path}: missing metadata")
    try:
        meta = json.loads(data.pop("meta").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {meta.get('version')}, expected {FORMAT_VERSION}")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in data.items():
        kind, _, name = key.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unexpected array {key!r}")
        groups[kind][name] = arr
    state = None
    if meta["optimizer"] is not None:
        state = OptimizerState(**meta["optimizer"], m=groups["adam_m"], v=groups["adam_v"])
    return Checkpoint(groups["param"], state, meta["epoch"], meta["model_config"], meta["rng_states"], meta["extra"])
