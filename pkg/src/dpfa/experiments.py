"""Scaled-down experiments on synthetic rooms.

* convergence: vanilla segmentation net, test OA after the last epoch;
* BF directional check: vanilla vs BF-regularised training over several
  seeds and lambdas;
* two-stage wiring: network 2 fed by a ground-truth background/foreground
  oracle vs vanilla.

Training runs are slow on a single core, so finished runs are memoised in a
JSON file keyed by a hash of the training code and the run config.  Any
change to either invalidates the entry; ``DPFA_FRESH=1`` ignores the
cache altogether.

    python -m dpfa.experiments --cache runs/results.json
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SceneSpec, synthesize_dataset
from .train import blocks_from_clouds, run

log = logging.getLogger("dpfa")

SEEDS = (0, 1, 2)
LAMBDAS = (0.1, 0.2, 0.5)


def acceptance_config(seed=0, **kw) -> RunConfig:
    """1024-point blocks, widths 32/32/32, K=10, 40 epochs; slim embedding and head for CPU budgets."""
    base = dict(seed=seed, k=10, widths=(32, 32, 32), emb_width=256, head_widths=(128, 64), samples=1024,
                block_size=1.0, epochs=40, batch_size=5, eval_every=40)
    base.update(kw)
    return RunConfig(**base).validate()


def scene_spec(seed=0) -> SceneSpec:
    return SceneSpec(seed=seed)


def synthetic_sets(cfg: RunConfig, n_train=40, n_test=10, data_seed=0):
    spec = scene_spec(data_seed)
    train_clouds = synthesize_dataset(spec, n_train)
    test_clouds = synthesize_dataset(spec, n_test, offset=n_train)
    # block sampling follows the data seed so every run sees the same blocks
    tr = blocks_from_clouds(train_clouds, cfg, [data_seed, 1]).with_graphs(cfg.k)
    te = blocks_from_clouds(test_clouds, cfg, [data_seed, 2]).with_graphs(cfg.k)
    return tr, te


# modules that cannot change a training result
_NOT_HASHED = {"__init__.py", "__main__.py", "cli.py", "experiments.py"}


def source_digest():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        if p.name in _NOT_HASHED:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class ResultCache:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.fresh = os.environ.get("DPFA_FRESH", "") not in ("", "0")
        self.digest = source_digest()
        self.entries = {}
        if self.path and self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def key(self, cfg: RunConfig, tag=""):
        blob = json.dumps(cfg.to_dict(), sort_keys=True) + tag
        return f"{self.digest}:{hashlib.sha256(blob.encode()).hexdigest()[:16]}"

    def get_or_run(self, cfg: RunConfig, fn, tag=""):
        k = self.key(cfg, tag)
        if not self.fresh and k in self.entries:
            return self.entries[k]
        out = fn()
        self.entries[k] = out
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True))
        return out


class Experiments:
    def __init__(self, cache_path=None, n_train=40, n_test=10, data_seed=0, **overrides):
        self.cache = ResultCache(cache_path)
        self.n_train, self.n_test, self.data_seed = n_train, n_test, data_seed
        self.overrides = overrides
        self._sets = None

    def config(self, seed, **kw):
        return acceptance_config(seed, **{**self.overrides, **kw})

    def sets(self):
        if self._sets is None:
            self._sets = synthetic_sets(self.config(0), self.n_train, self.n_test, self.data_seed)
        return self._sets

    def _run(self, cfg):
        def go():
            tr, te = self.sets()
            t0 = time.perf_counter()
            res = run(cfg, tr, te)
            final = res.final
            return dict(oa=final.oa, miou=final.miou, final_loss=res.losses[-1], seconds=time.perf_counter() - t0,
                        blocks=len(tr), test_blocks=len(te))

        tag = f"|data={self.n_train},{self.n_test},{self.data_seed}"
        out = self.cache.get_or_run(cfg, go, tag)
        log.info("seed %d mode %s lam %.2f: OA %.4f", cfg.seed, cfg.bf_mode, cfg.lam, out["oa"])
        return out

    def vanilla(self, seed):
        return self._run(self.config(seed))

    def regularized(self, seed, lam):
        return self._run(self.config(seed, bf_mode="regularizer", lam=lam))

    def two_stage_oracle(self, seed):
        return self._run(self.config(seed, bf_mode="two_stage", net1="oracle"))

    def convergence(self, seed=0, threshold=0.90):
        r = self.vanilla(seed)
        return dict(oa=r["oa"], threshold=threshold, passed=r["oa"] >= threshold, seconds=r["seconds"])

    def bf_directional(self, seeds=SEEDS, lams=LAMBDAS, margin=0.002):
        vanilla = np.array([self.vanilla(s)["oa"] for s in seeds])
        reg = {lam: np.array([self.regularized(s, lam)["oa"] for s in seeds]) for lam in lams}
        best = max(lams, key=lambda lam: (reg[lam].mean(), -lam))
        wins = int(np.sum(reg[best] >= vanilla))
        passed = reg[best].mean() >= vanilla.mean() - margin and wins >= 2
        return dict(vanilla=vanilla.tolist(), regularized={str(k): v.tolist() for k, v in reg.items()},
                    best_lambda=best, vanilla_mean=float(vanilla.mean()), best_mean=float(reg[best].mean()),
                    wins=wins, passed=bool(passed))

    def two_stage(self, seeds=SEEDS):
        vanilla = np.array([self.vanilla(s)["oa"] for s in seeds])
        staged = np.array([self.two_stage_oracle(s)["oa"] for s in seeds])
        return dict(vanilla=vanilla.tolist(), two_stage=staged.tolist(), vanilla_mean=float(vanilla.mean()),
                    two_stage_mean=float(staged.mean()), passed=bool(staged.mean() >= vanilla.mean()))


def main(argv=None):
    p = argparse.ArgumentParser(description="synthetic-room acceptance experiments")
    p.add_argument("--cache", default="runs/acceptance_results.json")
    p.add_argument("--only", choices=("convergence", "bf", "two_stage"), action="append")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    ex = Experiments(args.cache)
    todo = args.only or ["convergence", "bf", "two_stage"]
    if "convergence" in todo:
        print("convergence", json.dumps(ex.convergence()))
    if "bf" in todo:
        print("bf_directional", json.dumps(ex.bf_directional()))
    if "two_stage" in todo:
        print("two_stage", json.dumps(ex.two_stage()))


if __name__ == "__main__":
    main()
