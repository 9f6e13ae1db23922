"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per kernel and backend, the speedup, and the
max absolute difference between backend outputs.
"""

import argparse
import timeit

import numpy as np

from kmfusion import kernels

# shapes seen in the tiny model at 64x64 input (M1 runs on 32x32 = 1024 tokens)
SCAN_SHAPES = [(4, 256, 16, 8), (4, 1024, 16, 8), (2, 4096, 16, 8)]
SPLINE_SIZES = [10_000, 100_000]


def scan_inputs(shape, rng):
    N, L, E, S = shape
    return (
        rng.standard_normal((N, L, E)),
        rng.uniform(1e-3, 0.1, (N, L, E)),
        -rng.uniform(1, S, (E, S)),
        rng.standard_normal((N, L, S)),
        rng.standard_normal((N, L, S)),
        np.ones(E),
    )


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(repeat):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    rows = []
    for shape in SCAN_SHAPES:
        args = scan_inputs(shape, rng)
        gy = rng.standard_normal(args[0].shape)
        times, outs = {}, {}
        for name in backends:
            kernels.use_backend(name)
            y, hs = kernels.scan_forward(*args)
            outs[name] = (y, kernels.scan_backward(gy, *args, hs))
            times[name] = (
                best(lambda: kernels.scan_forward(*args), repeat),
                best(lambda: kernels.scan_backward(gy, *args, hs), repeat),
            )
        diff = _maxdiff(outs)
        for i, label in enumerate(("scan fwd", "scan bwd")):
            rows.append((label, "x".join(map(str, shape)), {k: v[i] for k, v in times.items()}, diff))
    for m in SPLINE_SIZES:
        x = rng.uniform(-1.2, 1.2, m)
        times, outs = {}, {}
        for name in backends:
            kernels.use_backend(name)
            outs[name] = kernels.bspline_basis(x, -1.0, 0.4, 5, 3)
            times[name] = best(lambda: kernels.bspline_basis(x, -1.0, 0.4, 5, 3), repeat)
        rows.append(("bspline k=3", str(m), times, _maxdiff(outs)))
    kernels.use_backend(backends[0] if "cython" not in backends else "cython")
    return backends, rows


def _maxdiff(outs):
    if len(outs) < 2:
        return float("nan")
    a, b = outs.values()
    flat_a, flat_b = _flatten(a), _flatten(b)
    return max(float(np.max(np.abs(p - q))) for p, q in zip(flat_a, flat_b))


def _flatten(obj):
    if isinstance(obj, np.ndarray):
        return [obj]
    return [arr for item in obj for arr in _flatten(item)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends, rows = bench(args.repeat)
    head = f"{'kernel':12s} {'size':>14s} " + " ".join(f"{b + ' ms':>11s}" for b in backends)
    if len(backends) == 2:
        head += f" {'speedup':>8s} {'max |diff|':>11s}"
    print(head)
    for label, size, times, diff in rows:
        line = f"{label:12s} {size:>14s} " + " ".join(f"{times[b] * 1e3:11.2f}" for b in backends)
        if len(backends) == 2:
            line += f" {times['python'] / times['cython']:8.1f} {diff:11.1e}"
        print(line)


if __name__ == "__main__":
    main()
