"""Time the numba and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from ugcn3d import kernels


def timeit(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(gen):
    for B, C, O, T, N, stride in ((8, 16, 16, 64, 17, 1), (8, 32, 32, 32, 17, 2), (8, 32, 32, 4, 17, 1)):
        x = gen.normal(size=(B, C, T, N))
        w = gen.normal(size=(O, C, 3))
        b = gen.normal(size=O)
        g = gen.normal(size=(B, O, kernels.out_length(T, stride), N))
        tag = f"B{B} C{C}->{O} T{T} N{N} s{stride}"
        yield f"tconv fwd  {tag}", lambda: kernels.temporal_conv_forward(x, w, b, stride)
        yield f"tconv bwd  {tag}", lambda: kernels.temporal_conv_backward(x, w, g, stride)
    values = gen.normal(size=(256, 17, 3))
    visible = gen.random((256, 17)) < 0.7
    visible[0] = True
    yield "fill_gaps  T256 N17", lambda: kernels.fill_gaps(values, visible)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    saved = kernels.get_backend()
    print(f"{'kernel':40s} " + " ".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    try:
        for name, fn in cases(np.random.default_rng(0)):
            times = []
            for b in backends:
                kernels.set_backend(b)
                times.append(timeit(fn, args.repeat))
            row = f"{name:40s} " + " ".join(f"{t * 1e3:10.3f}ms" for t in times)
            if len(times) == 2:
                row += f"  {times[0] / times[1]:9.2f}x"
            print(row)
    finally:
        kernels.set_backend(saved)


if __name__ == "__main__":
    main()
