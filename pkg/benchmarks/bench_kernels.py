"""Time the numba and numpy kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel pair is first checked for identical output on the benchmark
input, then timed with ``timeit`` (best of ``--repeat`` runs). A final row
times one full training episode per backend in a subprocess, since the
backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from npsm import kernels as k

EPISODE = r"""
import time
from npsm.config import RunConfig
from npsm.data import generate
from npsm.model import Model
from npsm.training import episode_inputs, episode_loss, plan_epoch
from npsm.tensor import Tape
ds = generate(seed=7, n_scenes=40, n_identities=4)
m = Model.init(RunConfig(), 4)
eps = plan_epoch(ds, 0, 0)[:20]
def run():
    for ep in eps:
        img, props, G, crop = episode_inputs(ds, ep)
        with Tape() as tape:
            total, _, _ = episode_loss(m, img, props, G, ep.identity, crop)
        tape.backward(total)
run()
t = time.perf_counter(); run(); print((time.perf_counter() - t) / len(eps))
"""


def cases(rng):
    x = rng.standard_normal((64, 64, 16)).astype(np.float32)
    cols = k._im2col_np(x, 3, 3, 2)
    fm = rng.standard_normal((16, 16, 32)).astype(np.float32)
    out, arg = k._roi_pool_forward_np(fm, 2, 14, 3, 12, 7)
    pts = rng.uniform(0, 128, size=(24, 2))
    centers = pts[[0, 7, 15]].copy()
    return [
        ("im2col 64x64x16 s2", k._im2col_nb, k._im2col_np, (x, 3, 3, 2)),
        ("col2im 64x64x16 s2", k._col2im_nb, k._col2im_np, (cols, 64, 64, 16, 3, 3, 2)),
        ("roi_pool fwd K=7", k._roi_pool_forward_nb, k._roi_pool_forward_np, (fm, 2, 14, 3, 12, 7)),
        ("roi_pool bwd K=7", k._roi_pool_backward_nb, k._roi_pool_backward_np, (out, arg, 16, 16)),
        ("kmeans n=24 C=3", k._kmeans_lloyd_nb, k._kmeans_lloyd_np, (pts, centers, 100, 1e-6)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def episode_time(backend):
    env = dict(os.environ, NPSM_BACKEND=backend)
    res = subprocess.run([sys.executable, "-c", EPISODE], env=env, capture_output=True, text=True, check=True)
    return float(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    ap.add_argument("--skip-episode", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name, nb, npf, a in cases(rng):
        if not same(nb(*a), npf(*a)):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = min(timeit.repeat(lambda: nb(*a), number=args.number, repeat=args.repeat)) / args.number
        t_np = min(timeit.repeat(lambda: npf(*a), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:<22}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>10.2f}")
    if not args.skip_episode:
        e_nb, e_np = episode_time("numba"), episode_time("numpy")
        print(f"{'training episode':<22}{e_nb * 1e6:>12.0f}{e_np * 1e6:>12.0f}{e_np / e_nb:>10.2f}")


if __name__ == "__main__":
    main()
