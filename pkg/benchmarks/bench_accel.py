"""Compare the numba kernels with their pure-numpy twins.

Kernel timings run both backends in this process. The end-to-end timing
runs a Laplace fit in two child processes, one with RQK_DISABLE_NUMBA=1.

    python benchmarks/bench_accel.py [--reps 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rqk import _accel

END_TO_END = """
import time, numpy as np
from rqk import _accel
from rqk.poisson import PoissonModel, fit_laplace_map
from rqk.simulate import simulate_poisson
sim = simulate_poisson(200, 20, np.random.default_rng(0))
model = PoissonModel.stationary(sim.t, sim.counts, sim.delta, offset=sim.log_base)
init = np.array([np.log(0.1), np.log(0.5), np.log(0.2), np.log(0.1)])
fit_laplace_map(model, init, max_iter=2)
t0 = time.perf_counter()
fit = fit_laplace_map(model, init)
print(_accel.BACKEND, time.perf_counter() - t0, fit.result.iterations)
"""


def median_time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def kernel_cases(rng):
    m, n = 64, 2000
    S = rng.standard_normal((m, n))
    a, b = 1 / np.sqrt(m), -(1 + 1 / np.sqrt(m)) / (m - 1)
    x = np.sort(rng.uniform(0, 1, 1000))
    eta = rng.normal(0, 1, 200_000)
    y = rng.poisson(1.0, eta.size).astype(float)
    return {
        "rotate 64x2000": lambda impl: impl.rotate(S, a, b),
        "rotate_sq 64x2000": lambda impl: impl.rotate_sq(S, a, b),
        "matern52 n=1000": lambda impl: impl.matern52(x, -2.0, 0.0),
        "sqexp n=1000": lambda impl: impl.sqexp(x, -2.0, 0.0),
        "poisson terms 2e5": lambda impl: impl.poisson(eta, y, 0.02),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--skip-end-to-end", action="store_true")
    args = p.parse_args()
    if _accel.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")
    print(f"{'kernel':<20} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    for name, call in kernel_cases(np.random.default_rng(0)).items():
        t_np = median_time(lambda: call(_accel.numpy_impl), args.reps)
        t_nb = median_time(lambda: call(_accel.numba_impl), args.reps)
        print(f"{name:<20} {t_np:>10.2e} {t_nb:>10.2e} {t_np / t_nb:>7.1f}x")
    if args.skip_end_to_end:
        return
    print("\nLaplace fit, n=200, m=20")
    for disable in ("0", "1"):
        env = dict(os.environ, RQK_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        backend, seconds, iters = out.stdout.split()
        print(f"  {backend:<6} {float(seconds):7.2f}s ({iters} iterations)")


if __name__ == "__main__":
    main()
