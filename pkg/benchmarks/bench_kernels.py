"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from lnprune import backend
from lnprune import tensor as T


def cases(rng):
    x = rng.random((32, 16, 32, 32), dtype=np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    b = np.zeros(32, np.float32)
    out = T.conv2d_forward(x, w, b, 1, 1)
    g = rng.standard_normal(out.shape).astype(np.float32)
    cols = backend.im2col(x, 3, 1, 1)
    pooled, arg = T.maxpool2d_forward(x, 2)
    gp = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col": lambda: backend.im2col(x, 3, 1, 1),
        "col2im": lambda: backend.col2im(cols, 32, 16, 32, 32, 3, 1, 1),
        "maxpool fwd": lambda: T.maxpool2d_forward(x, 2),
        "maxpool bwd": lambda: T.maxpool2d_backward(gp, arg, 32, 32),
        "conv fwd": lambda: T.conv2d_forward(x, w, b, 1, 1),
        "conv bwd": lambda: T.conv2d_backward(g, x, w, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = backend.available()
    timings = {}
    for name in names:
        with backend.use_backend(name):
            for op, fn in cases(np.random.default_rng(0)).items():
                fn()  # warm up
                timings[op, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
    ops = list(cases(np.random.default_rng(0)))
    print(f"{'op':<12}" + "".join(f"{n + ' ms':>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for op in ops:
        row = f"{op:<12}" + "".join(f"{timings[op, n]:>12.3f}" for n in names)
        if "cython" in names and "python" in names:
            row += f"{timings[op, 'python'] / timings[op, 'cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
