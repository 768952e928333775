"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--nodes 20000] [--degree 10] [--repeat 5]

Each kernel runs on identical inputs under both backends; outputs are
compared before any timing is reported.
"""
import argparse
import time

import numpy as np

from cagnn._kernels import available_backends, get_backend


def random_csr(rng, n, degree):
    counts = rng.poisson(degree, n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    targets = rng.integers(0, n, offsets[-1]).astype(np.int64)
    return offsets, targets


def cases(rng, n, degree, width):
    off, tgt = random_csr(rng, n, degree)
    vals = rng.random(len(tgt))
    x = rng.standard_normal((n, width))
    scores = rng.standard_normal(len(tgt))
    kx = rng.integers(0, 50, 3000).astype(float)
    ky = kx + rng.integers(0, 20, 3000)
    px, py = np.arange(9.0), np.array([1, 0, 3, 2, 5, 7, 4, 6, 8.0])
    return {
        "spmm": lambda k: k.spmm(off, tgt, vals, x),
        "spmm_t": lambda k: k.spmm_t(off, tgt, vals, x, n),
        "sddmm": lambda k: k.sddmm(off, tgt, x, x),
        "segment_softmax": lambda k: k.segment_softmax(off, scores),
        "kendall_counts(n=3000)": lambda k: k.kendall_counts(kx, ky),
        "kendall_permutation_tail(n=9)": lambda k: k.kendall_permutation_tail(px, py, 20),
    }


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=20000)
    ap.add_argument("--degree", type=int, default=10)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = {name: get_backend(name) for name in available_backends()}
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    table = cases(np.random.default_rng(0), args.nodes, args.degree, args.width)
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}")
    for name, fn in table.items():
        outs = {b: fn(k) for b, k in backends.items()}
        ref = outs["python"]
        for b, out in outs.items():
            np.testing.assert_allclose(np.asarray(out, dtype=float), np.asarray(ref, dtype=float),
                                       rtol=1e-10, atol=1e-10, err_msg=f"{name} differs under {b}")
        t = {b: best_time(lambda: fn(k), args.repeat) for b, k in backends.items()}
        speed = f"{t['python'] / t['cython']:9.1f}x" if "cython" in t else ""
        print(f"{name:32s}" + "".join(f"{t[b] * 1e3:10.2f}ms" for b in backends) + speed)


if __name__ == "__main__":
    main()
