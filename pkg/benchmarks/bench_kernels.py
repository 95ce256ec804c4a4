"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--paths 100000] [--repeat 5] [--json out.json]

Both backends receive identical inputs; outputs are compared before timing.
"""
import argparse
import json
import timeit

import numpy as np

from enlargectrl import kernels
from enlargectrl.enlargement import CoxTime
from enlargectrl.process_core import candidates, poisson_kernel, simulate_batch


def thin_inputs(n, seed):
    gen = np.random.default_rng(seed)
    kern = poisson_kernel(2.0, (-1, 1), bound=8)
    dt = 1e-3
    table = np.broadcast_to(kern.table[None], (1000,) + kern.table.shape)
    # a mild time profile so the table lookup is exercised per cell
    table = table * np.linspace(0.5, 1.0, 1000)[:, None, None, None]
    off, ct, cu = candidates(gen, n, 1.0, 2.0)
    tau = gen.exponential(2.0, n)
    return (off, ct, cu, tau, kern.bound, table, dt, np.asarray(kern.marks), 2.0)


def segment_inputs(n, seed):
    kern = poisson_kernel(2.0, (-1, 1), bound=8)
    b = simulate_batch(kern, CoxTime(0.5), 1.0, n, seed)
    return (b.offsets, b.times, b.mark, b.mark_delta, b.bound, 1.0, 1e-2, 100)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.dtype == b.dtype and np.array_equal(a, b)


def bench(name, fn, args, repeat):
    out = {}
    ref = {be: fn(*args, backend=be) for be in ("python", "cython")}
    if not same(ref["python"], ref["cython"]):
        raise SystemExit(f"{name}: backends disagree")
    for be in ("python", "cython"):
        t = timeit.repeat(lambda: fn(*args, backend=be), number=1, repeat=repeat)
        out[be] = min(t)
    out["speedup"] = out["python"] / out["cython"]
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write timings here")
    args = p.parse_args()
    if kernels.compiled_impl is None:
        raise SystemExit("compiled kernels are not built; run pip install --no-build-isolation -e .")

    res = {
        "thin_table": bench("thin_table", kernels.thin_table, thin_inputs(args.paths, args.seed), args.repeat),
        "build_segments": bench("build_segments", kernels.build_segments, segment_inputs(args.paths, args.seed),
                                args.repeat),
    }
    print(f"{'kernel':<16}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}   ({args.paths} paths)")
    for k, v in res.items():
        print(f"{k:<16}{v['python']:>12.4f}{v['cython']:>12.4f}{v['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"paths": args.paths, "repeat": args.repeat, "results": res}, fh, indent=2)


if __name__ == "__main__":
    main()
