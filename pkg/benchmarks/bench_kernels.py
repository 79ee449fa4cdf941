"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--size 194] [--channels 16] [--repeat 5]

Prints best-of-N wall time per kernel and checks both backends agree.
"""

import argparse
import time

import numpy as np

from mderain import _kernels_py

try:
    from mderain import _ckernels
except ImportError:
    _ckernels = None


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, channels, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, size + 2, size + 2, channels)).astype(dtype)
    cols = rng.standard_normal((4, size, size, 3, 3, channels)).astype(dtype)
    img = rng.random((size, size, 3)).astype(dtype)
    # single-channel views as in the SSIM window
    gray = rng.random((36, 64, 64, 1)).astype(dtype)
    return {
        "im2col 3x3": lambda k: k.im2col(x, 3, 3, 1, 1, size, size),
        "im2col 3x3 dil 3": lambda k: k.im2col(np.pad(x, ((0, 0), (2, 2), (2, 2), (0, 0))), 3, 3, 1, 3, size, size),
        "im2col 11x1 C=1": lambda k: k.im2col(gray, 11, 1, 1, 1, 54, 64),
        "col2im 3x3": lambda k: k.col2im(cols, size + 2, size + 2, 1, 1),
        "box_sum r=4": lambda k: k.box_sum(img, 4),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=194)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the numpy fallback is available")
    print(f"{'kernel':18s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  agree")
    for name, fn in cases(args.size, args.channels, np.dtype(args.dtype)).items():
        t_py = best_time(lambda: fn(_kernels_py), args.repeat)
        if _ckernels is None:
            print(f"{name:18s} {t_py * 1e3:10.2f} {'-':>10s} {'-':>8s}  -")
            continue
        t_c = best_time(lambda: fn(_ckernels), args.repeat)
        agree = np.allclose(fn(_kernels_py), fn(_ckernels), rtol=1e-5, atol=1e-5)
        print(f"{name:18s} {t_py * 1e3:10.2f} {t_c * 1e3:10.2f} {t_py / t_c:7.2f}x  {agree}")


if __name__ == "__main__":
    main()
