"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-``repeat`` wall time per kernel call for a few batch
shapes, plus one full training iteration for each backend.
"""

import argparse
import time

import numpy as np

from nicaimpute import kernels, nica
from nicaimpute.nica import NicaConfig

SHAPES = [(8, 178, 13), (8, 500, 8), (8, 1000, 10)]


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_attention(backend, x, repeat):
    scale = float(np.sqrt(x.shape[-1]))
    y, ctx = backend.attention_forward(x, scale)
    fwd = best_of(lambda: backend.attention_forward(x, scale), repeat)
    bwd = best_of(lambda: backend.attention_backward(ctx, np.ones_like(y), scale), repeat)
    return fwd, bwd


def bench_mlp(backend, c, repeat, rng):
    d = c.shape[1] // 2
    w1, b1 = rng.normal(size=(2 * d, 5 * d)), rng.normal(size=5 * d)
    w2, b2 = rng.normal(size=(5 * d, d)), rng.normal(size=d)
    keep = (rng.random((c.shape[0], 5 * d)) > 0.5) * 2.0
    out, ctx = backend.mlp_forward(c, w1, b1, w2, b2, keep, None)
    fwd = best_of(lambda: backend.mlp_forward(c, w1, b1, w2, b2, keep, None), repeat)
    bwd = best_of(lambda: backend.mlp_backward(ctx, np.ones_like(out)), repeat)
    return fwd, bwd


def bench_training(name, n, d, iterations):
    kernels.use(name)
    rng = np.random.default_rng(0)
    m = rng.random((n, d)) > 0.4
    x0 = np.where(m, rng.normal(size=(n, d)), 0.0)
    t = time.perf_counter()
    nica.train(x0, m, NicaConfig(iterations=iterations, seed=0))
    return (time.perf_counter() - t) / iterations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'shape':<14} " + " ".join(f"{b + ' ms':>14}" for b in backends) + "  speedup")
    for shape in SHAPES:
        x = rng.normal(size=shape)
        c = rng.normal(size=(shape[0] * shape[1], 2 * shape[2]))
        rows = {"attn fwd": {}, "attn bwd": {}, "mlp fwd": {}, "mlp bwd": {}}
        for name, backend in backends.items():
            rows["attn fwd"][name], rows["attn bwd"][name] = bench_attention(backend, x, args.repeat)
            rows["mlp fwd"][name], rows["mlp bwd"][name] = bench_mlp(backend, c, args.repeat, rng)
        for kernel, times in rows.items():
            cells = " ".join(f"{1e3 * times[b]:14.2f}" for b in backends)
            speed = f"  {times['python'] / times['compiled']:.1f}x" if "compiled" in times else ""
            print(f"{kernel:<10} {str(shape):<14} {cells}{speed}")

    print("\nseconds per training iteration (v=8, K=10)")
    original = kernels.BACKEND
    try:
        for n, d in ((178, 13), (500, 8)):
            per = {b: bench_training(b, n, d, args.iterations) for b in backends}
            cells = ", ".join(f"{b} {s:.3f}" for b, s in per.items())
            speed = f", speedup {per['python'] / per['compiled']:.1f}x" if "compiled" in per else ""
            print(f"  n={n} d={d}: {cells}{speed}")
    finally:
        kernels.use(original)


if __name__ == "__main__":
    main()
