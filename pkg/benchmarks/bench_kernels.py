"""Compiled vs pure-numpy kernels on reference-model layer shapes.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from voxbayes._kernels import _pykernels

try:
    from voxbayes._kernels import _ckernels
except ImportError:
    _ckernels = None

# (batch, channels, X, Y, Z) after padding, as seen by the three conv blocks
CONV_SHAPES = [(2, 1, 34, 34, 18), (2, 128, 18, 18, 10), (2, 128, 10, 10, 6)]
POOL_SHAPES = [(2, 128, 32, 32, 16), (2, 128, 16, 16, 8)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def rows(repeat):
    rng = np.random.default_rng(0)
    for shape in CONV_SHAPES:
        x = rng.normal(size=shape)
        cols = _pykernels.im2col3d(x, (3, 3, 3), 1)
        yield "im2col3d", shape, (lambda m: lambda: m.im2col3d(x, (3, 3, 3), 1))
        yield "col2im3d", shape, (lambda m: lambda: m.col2im3d(cols, shape, (3, 3, 3), 1))
    for shape in POOL_SHAPES:
        x = rng.normal(size=shape)
        _, arg = _pykernels.maxpool3d_forward(x, (2, 2, 2), 2)
        g = rng.normal(size=arg.shape)
        yield "maxpool_fwd", shape, (lambda m: lambda: m.maxpool3d_forward(x, (2, 2, 2), 2))
        yield "maxpool_bwd", shape, (lambda m: lambda: m.maxpool3d_backward(g, arg, shape, (2, 2, 2), 2))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<12} {'shape':<22} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, shape, make in rows(args.repeat):
        tp = best_of(make(_pykernels), args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:<12} {str(shape):<22} {tp:>10.2f} {'n/a':>10} {'':>8}")
            continue
        tc = best_of(make(_ckernels), args.repeat) * 1e3
        print(f"{name:<12} {str(shape):<22} {tp:>10.2f} {tc:>10.2f} {tp / tc:>7.2f}x")


if __name__ == "__main__":
    main()
