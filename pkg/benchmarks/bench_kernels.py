"""Benchmark the compiled correlation core against the numpy fallback.

Times the three kernels on training-shaped workloads plus one end-to-end
forward/reverse pass of the step model, for each backend.  Run:

    python benchmarks/bench_kernels.py [--batch 128] [--repeats 5]
"""

import argparse
import time

import numpy as np

from pdelearn import kernels
from pdelearn.fields import Grid2D
from pdelearn.model import FilterMode, ModelConfig, StepModel


def best_of(repeats, fn, *args, **kwargs):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(batch, repeats):
    H = W = 50
    F, n = 16, 7
    rng = np.random.default_rng(0)
    u = rng.standard_normal((batch, H, W))
    filt = rng.standard_normal((F, n, n))
    g = rng.standard_normal((batch, F, H, W))

    rows = []
    for name in ("python", "compiled"):
        try:
            mod = kernels.get_backend(name)
        except ImportError:
            print(f"[{name}] backend unavailable, skipping")
            continue
        kw = {"threads": kernels.get_threads()} if name == "compiled" else {}
        rows.append((
            name,
            best_of(repeats, mod.corr_many, u, filt, True, **kw),
            best_of(repeats, mod.corr_accum, g, filt, True, **kw),
            best_of(repeats, mod.corr_wgrad, g, u, n, True, **kw),
        ))
    return rows


def bench_model(batch, repeats):
    grid = Grid2D(50, 50)
    model = StepModel(ModelConfig("linear", grid, filter_size=7, max_order=4,
                                  mode=FilterMode.CONSTRAINED))
    theta = model.default_params()
    rng = np.random.default_rng(1)
    u = rng.standard_normal((batch, 50, 50))
    out, states = model.forward_batch(u, theta, 3, keep_states=True)
    gbar = 2.0 * (out - u)
    fwd = best_of(repeats, model.forward_batch, u, theta, 3, keep_states=True)
    bwd = best_of(repeats, model.backward_batch, states, theta, gbar)
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    if args.threads:
        kernels.set_threads(args.threads)

    print(f"active backend: {kernels.backend_name()}  "
          f"threads: {kernels.get_threads()}  batch: {args.batch}")
    rows = bench_kernels(args.batch, args.repeats)
    print(f"\n{'backend':<10} {'corr_many':>12} {'corr_accum':>12} {'corr_wgrad':>12}")
    for name, a, b, c in rows:
        print(f"{name:<10} {a:>11.4f}s {b:>11.4f}s {c:>11.4f}s")
    if len(rows) == 2:
        speedups = [rows[0][i] / rows[1][i] for i in (1, 2, 3)]
        print(f"{'speedup':<10} " + " ".join(f"{s:>11.2f}x" for s in speedups))

    fwd, bwd = bench_model(args.batch, args.repeats)
    print(f"\nstep model (depth 3, {args.batch} fields, backend "
          f"{kernels.backend_name()}): forward {fwd:.4f}s reverse {bwd:.4f}s")


if __name__ == "__main__":
    main()
