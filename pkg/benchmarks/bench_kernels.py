"""Time each hot kernel under numba and under plain numpy.

    python3 benchmarks/bench_kernels.py [--repeat N] [--batch B]

Shapes are those of one training step of the default model (batch 32,
15x35x2 input, 12 conv channels, 525 attention tokens). Numba compile
time is excluded by a warm-up call. These numbers decide the dispatch in
saconvnet.kernels: attention, AUC pair counting and convolutions deeper
than NUMBA_CONV_MAX_CIN input channels use numpy under either backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from saconvnet import kernels
from saconvnet._accel import BACKEND, HAVE_NUMBA


def cases(batch: int, rng: np.random.Generator):
    x1 = rng.standard_normal((batch, 15, 35, 2))
    k1 = rng.standard_normal((3, 3, 2, 12))
    g1 = rng.standard_normal((batch, 15, 35, 12))
    x2 = rng.standard_normal((batch, 7, 17, 16))
    k2 = rng.standard_normal((3, 3, 16, 12))
    g2 = rng.standard_normal((batch, 7, 17, 12))
    b = np.zeros(12)
    pool_in = rng.standard_normal((batch, 15, 35, 16))
    _, idx = kernels.maxpool_forward_numpy(pool_in, 2)
    pool_g = rng.standard_normal(idx.shape)
    scores = rng.random(2000)
    pos, neg = scores[:100], scores[100:]
    q, k, v = (rng.standard_normal((batch, 525, d)) for d in (2, 2, 1))
    att_out, att_w = kernels.attention_forward_numpy(q, k, v)
    att_g = rng.standard_normal(att_out.shape)

    yield "conv2d forward (block 1)", "conv2d_forward", (x1, k1, b)
    yield "conv2d backward (block 1)", "conv2d_backward", (x1, k1, g1)
    yield "conv2d forward (block 2)", "conv2d_forward", (x2, k2, b)
    yield "conv2d backward (block 2)", "conv2d_backward", (x2, k2, g2)
    yield "maxpool forward", "maxpool_forward", (pool_in, 2)
    yield "maxpool backward", "maxpool_backward", (pool_g, idx, pool_in.shape, 2)
    yield "pair_wins 100x1900", "pair_wins", (pos, neg)
    yield "attention forward (1 head)", "attention_forward", (q, k, v)
    yield "attention backward (1 head)", "attention_backward", (q, k, v, att_w, att_out, att_g)


def bench(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up / jit compile
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)

    if not HAVE_NUMBA:
        print("numba is not installed; the *_numba kernels run as plain Python")
    print(f"package backend: {BACKEND}")
    print(f"{'kernel':<30}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for label, name, fargs in cases(args.batch, np.random.default_rng(0)):
        t_jit = bench(getattr(kernels, f"{name}_numba"), fargs, args.repeat)
        t_np = bench(getattr(kernels, f"{name}_numpy"), fargs, args.repeat)
        print(f"{label:<30}{t_jit * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_jit:>8.2f}x")


if __name__ == "__main__":
    main()
