"""Numba vs numpy backends: kernel timings and a full fwd+bwd training step.

Each backend runs in its own interpreter because the choice is made at
import time from ``DPFA_DISABLE_NUMBA``.

    python benchmarks/bench_backends.py [--points 1024] [--repeats 20]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from dpfa import kernels, tensor as T
from dpfa.networks import SegNet
from dpfa.knn_graph import knn

n, reps = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)

def timed(fn):
    fn()  # warm-up (and JIT compilation)
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter(); fn(); ts.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(ts))

X3, X32 = rng.random((n, 3)), rng.normal(size=(n, 32))
idx = rng.integers(0, n, size=(n, 10))
grad = rng.normal(size=(n, 10, 32))
net = SegNet(9, 8, widths=(32, 32, 32), emb_width=256, head_widths=(128, 64), k=10)
x = rng.random((n, 9)).astype(np.float32)
y = rng.integers(0, 8, size=n)

def step():
    g = T.Graph()
    with g:
        loss = T.cross_entropy(net(x), y)
    g.backward(loss)

out = dict(
    backend=kernels.BACKEND,
    knn_d3_ms=timed(lambda: knn(X3, 10)),
    knn_d32_ms=timed(lambda: knn(X32, 10)),
    scatter_ms=timed(lambda: kernels.scatter_add_rows(grad, idx, n)),
    train_step_ms=timed(step),
)
print(json.dumps(out))
"""


def run(disable, points, repeats):
    env = dict(os.environ, DPFA_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(points), str(repeats)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args()
    rows = [run(False, args.points, args.repeats), run(True, args.points, args.repeats)]
    keys = [k for k in rows[0] if k.endswith("_ms")]
    print(f"{'median ms':<16}" + "".join(f"{r['backend']:>10}" for r in rows) + f"{'speedup':>10}")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k[:-3]:<16}{a:10.2f}{b:10.2f}{b / a:9.2f}x")


if __name__ == "__main__":
    main()
