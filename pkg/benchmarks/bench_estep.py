"""Time one E-step pass with the compiled and the numpy kernels.

    python benchmarks/bench_estep.py --n 100 400 1600 --repeat 5 --threads 1 4
"""
import argparse
import time

import numpy as np

from icmsm.em import _sweep, prepare
from icmsm.kernels import available_backends
from icmsm.prodint import uniform_estimate
from icmsm.simulate import BUILTIN_SCENARIOS, builtin_scenario, simulate_panel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", default="scenario2", choices=BUILTIN_SCENARIOS)
    p.add_argument("--n", type=int, nargs="+", default=[100, 400, 1600])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", type=int, nargs="+", default=[1])
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args(argv)

    spec = builtin_scenario(args.scenario)
    backends = available_backends()
    print(f"{'n':>6} {'K':>6} {'threads':>7} " + " ".join(f"{b:>10}" for b in backends)
          + ("    speedup" if len(backends) == 2 else ""))
    for n in args.n:
        pr = prepare(simulate_panel(spec, n, seed=args.seed))
        alpha = uniform_estimate(pr.graph, pr.grid.taus).alpha
        ref = None
        for threads in args.threads:
            row = {}
            for b in backends:
                out = _sweep(pr, alpha, True, False, threads, b)
                if ref is None:
                    ref = out
                else:
                    np.testing.assert_allclose(out[0], ref[0], rtol=1e-10, atol=1e-12)
                row[b] = best_of(lambda: _sweep(pr, alpha, True, False, threads, b),
                                 args.repeat)
            line = f"{n:>6} {pr.grid.K:>6} {threads:>7} " + " ".join(
                f"{row[b] * 1e3:>8.2f}ms" for b in backends)
            if len(backends) == 2:
                line += f"  {row['python'] / row['cython']:>8.1f}x"
            print(line)


if __name__ == "__main__":
    main()
