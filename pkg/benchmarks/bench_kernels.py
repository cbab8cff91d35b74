"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--reps 5] [--h 64 --w 2048]

Times im2col, col2im, the convolution product, pixel bucketing, the masked
median and one network forward pass at full sensor resolution on each available backend, checks that both give
identical outputs, and prints a table with the speedup.
"""
import argparse
import time

import numpy as np

from lisnownet import kernels
from lisnownet import autodiff as ad
from lisnownet.model import NetworkConfig, forward, init_params


def _time(fn, reps):
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def cases(h, w, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 8, h, w)).astype(np.float32)
    cols = rng.normal(size=(1, 8 * 9, h * w)).astype(np.float32)
    w2 = rng.normal(size=(8, 8 * 9)).astype(np.float32)
    flat = rng.integers(0, h * w, 110_000)
    ranges = rng.uniform(1, 80, 110_000)
    img = rng.random((h, w, 2))
    valid = rng.random((h, w)) > 0.2
    params = init_params(NetworkConfig(), seed=seed, dtype=np.float32)
    # nonzero output layer so the forward pass does real work in every conv
    params["tail.weight"].data[...] = rng.normal(scale=0.01, size=params["tail.weight"].shape)
    net_in = rng.random((1, 2, h, w)).astype(np.float32)

    def net():
        with ad.no_grad():
            return forward(params, net_in).data

    return {
        "im2col 8ch 3x3": lambda: kernels.im2col(x, 3, 3),
        "col2im 8ch 3x3": lambda: kernels.col2im(cols, x.shape, 3, 3),
        "conv_gemm 8->8": lambda: kernels.conv_gemm(w2, cols),
        "bucket 110k pts": lambda: kernels.bucket_order(flat, ranges, h * w),
        "median 5x5": lambda: kernels.masked_median_flags(img, valid, 2, 0.05, 0.05),
        "network forward": net,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--h", type=int, default=64)
    ap.add_argument("--w", type=int, default=2048)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the python backend is available")
    results = {}
    outputs = {}
    previous = kernels.BACKEND
    try:
        for backend in backends:
            kernels.use_backend(backend)
            for name, fn in cases(args.h, args.w).items():
                results[name, backend] = _time(fn, args.reps)
                outputs[name, backend] = fn()
    finally:
        kernels.use_backend(previous)

    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}{'identical':>11}")
    for name in cases(8, 8):
        row = f"{name:<18}" + "".join(f"{results[name, b]:>12.2f}" for b in backends)
        if len(backends) == 2:
            a, b = outputs[name, "cython"], outputs[name, "python"]
            same = all(map(np.array_equal, a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
            row += f"{results[name, 'python'] / results[name, 'cython']:>9.2f}x{str(same):>11}"
        print(row)


if __name__ == "__main__":
    main()
