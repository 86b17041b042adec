"""Time the numba kernels against their numpy fallbacks.

Kernel-level timings call both implementations side by side. The end-to-end
rows (a training step and a GrabCut run) compare two processes, one started
with ``SERIALGAN_NO_NUMBA=1``.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def best_of(fn, repeat, number=1):
    fn()  # warm-up, includes numba compilation
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    from serialgan import kernels

    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 32, 16, 16)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 4, 2, 1)
    img = rng.uniform(size=(256, 256, 3))
    ys, xs = np.mgrid[0:128, 0:128] * 1.9 + 0.3
    cases = [
        ("im2col 32x32x16x16 k4 s2", lambda: kernels.im2col_numba(x, 4, 2, 1), lambda: kernels.im2col_numpy(x, 4, 2, 1)),
        ("col2im 32x32x16x16 k4 s2", lambda: kernels.col2im_numba(cols, x.shape, 4, 2, 1),
         lambda: kernels.col2im_numpy(cols, x.shape, 4, 2, 1)),
        ("bilinear 128x128 from 256x256", lambda: kernels.bilinear_sample_numba(img, xs, ys),
         lambda: kernels.bilinear_sample_numpy(img, xs, ys)),
    ]
    return [(name, best_of(a, repeat), best_of(b, repeat)) for name, a, b in cases]


def _pipeline_timings(repeat):
    """Run inside a child process; the backend is whatever the environment selects."""
    from serialgan.dataset import render_scene
    from serialgan.model import ModelConfig, init_model
    from serialgan.segmentation import grabcut
    from serialgan.trainer import TrainConfig, discriminator_step, generator_step

    rng = np.random.default_rng(0)
    state = init_model(ModelConfig(side=64, width=16))
    x = rng.uniform(-1, 1, (32, 3, 64, 64)).astype(np.float32)
    cfg = TrainConfig()

    def step():
        out, caches = state.forward_nchw(x, train=True)
        discriminator_step(state, x, out, cfg, 1)
        generator_step(state, x, out, caches, cfg, 1)

    img, _, rect = render_scene(np.random.default_rng(1))
    return {"train step (batch 32, side 64, width 16)": best_of(step, repeat),
            "grabcut 96x96 scene, 5 iterations": best_of(lambda: grabcut(img, rect), max(1, repeat // 2))}


def pipeline_rows(repeat):
    code = f"import json, bench_kernels as b; print(json.dumps(b._pipeline_timings({repeat})))"
    here = os.path.dirname(os.path.abspath(__file__))
    out = {}
    for flag in ("0", "1"):
        env = {**os.environ, "SERIALGAN_NO_NUMBA": flag, "PYTHONPATH": here + os.pathsep + os.environ.get("PYTHONPATH", "")}
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[flag] = json.loads(res.stdout.strip().splitlines()[-1])
    return [(name, out["0"][name], out["1"][name]) for name in out["0"]]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rows = kernel_rows(args.repeat) + pipeline_rows(args.repeat)
    print(f"{'case':<42}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for name, a, b in rows:
        print(f"{name:<42}{a * 1e3:>11.2f}{b * 1e3:>11.2f}{b / a:>8.1f}x")


if __name__ == "__main__":
    main()
