"""Compiled vs numpy attention backend timings.

    python3 benchmarks/bench_kernels.py [--runs 5] [--csv out.csv]

Times the raw varlen kernel on packed streams of several shapes, then a
full encoder forward pass, once per available backend. Single thread.
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from bcmb import kernels
from bcmb.bench import WorkloadSpec, compare_backends, generate_workload
from bcmb.model import EncoderModel, ModelConfig

# (label, doc lengths, heads, head_dim, half_window)
KERNEL_CASES = [
    ("64x512 global", [512] * 64, 12, 64, -1),
    ("64x512 local", [512] * 64, 12, 64, 64),
    ("8x4096 local", [4096] * 8, 12, 64, 64),
    ("ragged global", list(np.random.default_rng(0).integers(16, 1024, 48)), 12, 64, -1),
]


def time_kernel(lengths, heads, head_dim, hw, backend, runs):
    rng = np.random.default_rng(1)
    n = int(sum(lengths))
    q, k, v = (rng.standard_normal((n, heads, head_dim)).astype(np.float32) for _ in range(3))
    cu = np.concatenate([[0], np.cumsum(lengths)])
    kernels.varlen_attention(q, k, v, cu, hw, head_dim**-0.5, backend=backend)  # warmup
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        kernels.varlen_attention(q, k, v, cu, hw, head_dim**-0.5, backend=backend)
        times.append(time.perf_counter() - t0)
    return n, statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled backend not built; only numpy is available", file=sys.stderr)
    rows = []
    with threadpool_limits(1):
        for label, lengths, h, hd, hw in KERNEL_CASES:
            for b in backends:
                n, t = time_kernel(lengths, h, hd, hw, b, args.runs)
                rows.append(("kernel", label, b, f"{t * 1e3:.1f}", f"{n / t / 1e3:.1f}"))
        cfg = ModelConfig(n_layers=6, d_model=256, n_heads=4, d_ff=512, vocab_size=1000, max_seq_len=4096, window=128)
        model = EncoderModel.init(cfg)
        for max_len in (512, 4096):
            docs = generate_workload(WorkloadSpec(max_len, "normal", 4096 * 8 // max_len), cfg.vocab_size)
            for b, ktok in compare_backends(model, docs, args.runs).items():
                rows.append(("encoder", f"L{max_len} variable unpadded", b, "", f"{ktok:.1f}"))
    header = ("level", "case", "backend", "median_ms", "ktok_per_s")
    w = csv.writer(open(args.csv, "w", newline="") if args.csv else sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


if __name__ == "__main__":
    main()
