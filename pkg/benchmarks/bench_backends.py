"""Timing comparison of the numba and numpy kernel twins.

Runs every hot kernel on embedding-bag-shaped workloads with both
implementations, checks the outputs are bit-identical, and prints a
small table. The numba twins get an untimed warmup call so JIT
compilation never lands in a measurement.

    python3 benchmarks/bench_backends.py [--scale 2.0] [--repeats 7]
"""
import argparse
import time

import numpy as np

from rankfuse import kernels


def _best_of(fn, make_args, repeats):
    best = float("inf")
    for _ in range(repeats):
        args = make_args()
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _segments(rng, n_segments, mean_len):
    lengths = rng.poisson(mean_len, size=n_segments)
    offsets = np.zeros(n_segments + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    ids = rng.integers(0, 50_000, size=int(offsets[-1]))
    return np.ascontiguousarray(ids, dtype=np.int64), offsets


def workloads(scale):
    rng = np.random.default_rng(0)
    n = int(200_000 * scale)
    out_shape = (4096, 16)
    ids = rng.integers(0, out_shape[0], size=n)
    rows = rng.normal(size=(n, out_shape[1]))
    seg_ids, seg_offsets = _segments(rng, int(4096 * scale), 30)
    table = rng.normal(size=(50_000, 32))
    grad_out = rng.normal(size=(seg_offsets.shape[0] - 1, 32))
    # pad width must bound every segment, so clip the raw lengths at 50
    width = 50
    raw_ids, raw_offsets = _segments(rng, int(4096 * scale), 35)
    lengths = np.minimum(raw_offsets[1:] - raw_offsets[:-1], width)
    pad_offsets = np.zeros_like(raw_offsets)
    np.cumsum(lengths, out=pad_offsets[1:])
    pad_ids = np.concatenate(
        [raw_ids[lo : lo + ln] for lo, ln in zip(raw_offsets[:-1], lengths)]
    )

    return {
        "scatter_add_rows": lambda: (np.zeros(out_shape), ids, rows),
        "segment_mean": lambda: (
            table,
            seg_ids,
            seg_offsets,
            np.zeros((seg_offsets.shape[0] - 1, table.shape[1])),
        ),
        "segment_mean_grad": lambda: (np.zeros_like(table), seg_ids, seg_offsets, grad_out),
        "pad_segments": lambda: (np.ascontiguousarray(pad_ids), pad_offsets, width),
    }


def outputs_match(name, make_args):
    a_args = make_args()
    b_args = make_args()
    ra = kernels.numpy_impl[name](*a_args)
    rb = kernels.numba_impl[name](*b_args)
    if name == "pad_segments":
        return np.array_equal(ra[0], rb[0]) and np.array_equal(ra[1], rb[1])
    # in-place kernels: compare the mutated first argument
    return np.array_equal(a_args[0], b_args[0])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scale", type=float, default=1.0, help="workload size multiplier")
    parser.add_argument("--repeats", type=int, default=5, help="timed runs per kernel")
    args = parser.parse_args()

    print(f"active backend: {kernels.ACTIVE_BACKEND}")
    if kernels.numba_impl is None:
        print("numba is not importable; nothing to compare against")
        return

    print(f"{'kernel':20s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}  identical")
    for name, make_args in workloads(args.scale).items():
        # warm the JIT outside the timers
        kernels.numba_impl[name](*make_args())
        t_np = _best_of(kernels.numpy_impl[name], make_args, args.repeats)
        t_nb = _best_of(kernels.numba_impl[name], make_args, args.repeats)
        same = outputs_match(name, make_args)
        print(
            f"{name:20s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms "
            f"{t_np / t_nb:7.2f}x  {same}"
        )


if __name__ == "__main__":
    main()
