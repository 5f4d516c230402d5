"""Time the selective-scan forward and backward passes for each available backend.

Usage: python benchmarks/bench_scan.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from hsimamba.scan import BACKENDS

# (batch, length, channels, state): a full-image spatial sequence, a spatial
# sequence for one cluster, and the grouped spectral scan over every token
CASES = [(1, 4096, 32, 16), (1, 410, 32, 16), (1024, 4, 8, 16)]


def make_inputs(N, L, d, s, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(N, L, d)), rng.uniform(0.01, 0.1, size=(N, L, d)),
            -rng.uniform(0.5, 16, size=(d, s)), rng.normal(size=(N, L, s)), rng.normal(size=(N, L, s)))


def bench(repeat):
    rows = []
    for case in CASES:
        x, delta, A, B, C = make_inputs(*case)
        gy = np.ones_like(x)
        for name, impl in sorted(BACKENDS.items()):
            y, hs = impl.scan_forward(x, delta, A, B, C)
            fwd = min(timeit.repeat(lambda: impl.scan_forward(x, delta, A, B, C), number=1, repeat=repeat))
            bwd = min(timeit.repeat(lambda: impl.scan_backward(gy, x, delta, A, B, C, hs),
                                    number=1, repeat=repeat))
            rows.append({"shape": list(case), "backend": name, "forward_ms": 1e3 * fwd,
                         "backward_ms": 1e3 * bwd})
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json")
    args = parser.parse_args()
    rows = bench(args.repeat)
    print(f"{'N,L,d,s':>18} {'backend':>8} {'forward ms':>11} {'backward ms':>12}")
    for r in rows:
        print(f"{str(tuple(r['shape'])):>18} {r['backend']:>8} {r['forward_ms']:11.2f} {r['backward_ms']:12.2f}")
    if "cython" in BACKENDS:
        for case in CASES:
            t = {r["backend"]: r["forward_ms"] + r["backward_ms"] for r in rows if r["shape"] == list(case)}
            print(f"speedup {case}: {t['python'] / t['cython']:.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
