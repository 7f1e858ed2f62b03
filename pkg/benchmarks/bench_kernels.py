"""Benchmark the hot kernels: compiled path vs pure-numpy fallback.

Times each kernel on shapes representative of a desk-scale run and prints
the median per-call latency of both implementations plus the speedup.
Run as:  python3 benchmarks/bench_kernels.py [--repeats N] [--batch B]
"""

import argparse
import statistics
import time

import numpy as np

import hclab._kernels as kn


def time_call(fn, args, repeats):
    fn(*args)  # warmup (and JIT compilation on the compiled path)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def build_cases(batch, rng):
    logits = rng.normal(scale=1.5, size=(batch, 4, 4))
    wide = rng.normal(size=(batch, 8, 8)) + 4.0 * np.eye(8)
    _, m0, iterates, scales = kn._sinkhorn_fwd_np(logits, 20)
    dout = rng.normal(size=logits.shape)
    flat = rng.normal(size=1_000_000)
    adam = (
        flat.copy(), rng.normal(size=flat.size), np.zeros(flat.size),
        np.full(flat.size, 0.1), 3e-3, 0.9, 0.95, 1e-8, 0.1, 0.2, 0.1,
    )
    return [
        ("inverse 8x8", kn._inverse_batch_np, kn._inverse_batch_nb, (wide,)),
        ("sinkhorn fwd 4x4 x20", kn._sinkhorn_fwd_np, kn._sinkhorn_fwd_nb, (logits, 20)),
        (
            "sinkhorn bwd 4x4 x20",
            kn._sinkhorn_bwd_np,
            kn._sinkhorn_bwd_nb,
            (dout, m0, iterates, scales),
        ),
        (
            "power iter 4x4",
            kn._power_iter_np,
            kn._power_iter_nb,
            (logits, np.ones(4), 1e-10, 200),
        ),
        ("adamw 1e6", kn._adamw_np, kn._adamw_nb, adam),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=512)
    args = ap.parse_args()

    if not kn.HAS_NUMBA:
        print("note: compiled path unavailable (HCLAB_NO_NUMBA set or numba missing);")
        print("      the two columns below time the same numpy implementation.\n")

    rng = np.random.default_rng(0)
    print(f"batch={args.batch}  repeats={args.repeats}  (median ms per call)\n")
    print(f"{'kernel':<22}  {'numpy':>10}  {'compiled':>10}  {'speedup':>8}")
    for name, fn_np, fn_nb, call_args in build_cases(args.batch, rng):
        # adamw mutates its buffers in place; give each path fresh copies
        np_args = tuple(a.copy() if isinstance(a, np.ndarray) else a for a in call_args)
        nb_args = tuple(a.copy() if isinstance(a, np.ndarray) else a for a in call_args)
        ms_np = time_call(fn_np, np_args, args.repeats)
        ms_nb = time_call(fn_nb, nb_args, args.repeats)
        ratio = ms_np / ms_nb if ms_nb > 0 else float("inf")
        print(f"{name:<22}  {ms_np:>9.3f}  {ms_nb:>9.3f}  {ratio:>7.1f}x")


if __name__ == "__main__":
    main()
