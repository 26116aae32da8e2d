"""Timing harness: structured vs dense Gaussian densities, and MAP runtime.

Every cell passes a correctness gate before any cell is timed; each timing
discards one warm-up call and reports the median of at least five
monotonic-clock replicates.
BLAS is pinned to one thread unless ``parallel`` is requested, in which
case cells run concurrently and the output says the timings interfere.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from threadpoolctl import threadpool_limits

from . import core
from .errors import CapExceeded, OptimizerDiverged, RqkError
from .gaussian import GaussianModel, fit_map
from .kernels import Grid, KernelSpec, build_kernel_matrix
from .simulate import simulate_gaussian

NAIVE = "naive_cholesky"
RQK_CHOLESKY = "rqk_cholesky"
RQK_EIGEN = "rqk_eigen"
METHODS = (NAIVE, RQK_CHOLESKY, RQK_EIGEN)
NAIVE_CAP = 8192
GATE_TOL = 1e-6
MIN_REPLICATES = 5
BENCH_THETA = (np.log(0.1), 0.0)
# noise added to A so the density is the one fitted by the Gaussian model
BENCH_NOISE = 1.0
FORMAT_VERSION = 1


class GateFailure(RqkError, AssertionError):
    pass


@dataclass
class BenchRow:
    n: int
    m: int
    method: str
    median_seconds: float
    replicates: int


@dataclass
class BenchResult:
    kind: str
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    parallel: bool = False

    def slopes(self):
        return fit_slopes(self.rows)


def median_time(fn, replicates):
    """Median wall time of ``fn()`` over ``replicates`` calls after one warm-up."""
    fn()
    times = []
    for _ in range(replicates):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def random_rqk(n, m, noise=BENCH_NOISE):
    """Matern 5/2 blocks at ``theta = (log 0.1, 0)`` on a regular grid."""
    grid = Grid.regular(n)
    K = build_kernel_matrix(KernelSpec.matern52(0, 1), BENCH_THETA, grid)
    A = K + noise * np.eye(n)
    return core.RqkMatrix(A, K, m)


def naive_logdensity(S, x, cap=NAIVE_CAP):
    """Materialize the covariance, Cholesky-factor it, evaluate the density."""
    D = core.to_dense(S, cap)
    L, _ = scipy.linalg.cho_factor(D, lower=True, overwrite_a=True, check_finite=False)
    z = scipy.linalg.solve_triangular(L, x, lower=True, check_finite=False)
    return -0.5 * x.size * np.log(2 * np.pi) - float(np.sum(np.log(np.diag(L)))) - 0.5 * float(z @ z)


def structured_logdensity(S, x, method):
    return core.rqk_logdensity(core.rqk_factor(S, method), x)


def _arms(S, x, cap):
    arms = {
        RQK_CHOLESKY: lambda: structured_logdensity(S, x, core.CHOLESKY),
        RQK_EIGEN: lambda: structured_logdensity(S, x, core.EIGEN),
    }
    if S.size <= cap:
        arms[NAIVE] = lambda: naive_logdensity(S, x, cap)
    return arms


def check_gate(values, n, m):
    ref = values[RQK_CHOLESKY]
    for method, v in values.items():
        if not np.isfinite(v) or abs(v - ref) > GATE_TOL:
            raise GateFailure(
                f"n={n} m={m}: {method} gives {v!r}, {RQK_CHOLESKY} gives {ref!r} (tolerance {GATE_TOL})"
            )


def _density_prepare(n, m, seed, cap):
    S = random_rqk(n, m)
    rng = np.random.default_rng([seed, n, m])
    x = core.correlate(core.rqk_factor(S), rng.standard_normal(n * m))
    arms = _arms(S, x, cap)
    check_gate({k: fn() for k, fn in arms.items()}, n, m)
    return arms


def _density_time(n, m, arms, replicates):
    rows = [BenchRow(n, m, k, median_time(arms[k], replicates), replicates) for k in METHODS if k in arms]
    skipped = [] if NAIVE in arms else [(n, m, NAIVE)]
    return rows, skipped


def _run_cells(cells, work, parallel):
    if parallel:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(lambda c: work(*c), cells))
    with threadpool_limits(limits=1):
        return [work(*c) for c in cells]


def bench_density(ns, ms, replicates=MIN_REPLICATES, seed=0, cap=NAIVE_CAP, parallel=False):
    """Time the three density arms on every (n, m) cell.

    Cells with ``mn`` above ``cap`` drop the naive arm and are listed in
    ``skipped``; arms disagreeing by more than ``GATE_TOL`` raise
    :class:`GateFailure` before anything is timed.
    """
    if replicates < MIN_REPLICATES:
        raise ValueError(f"at least {MIN_REPLICATES} replicates are required")
    cells = [(n, m) for n in ns for m in ms]
    # gating every cell before timing any also warms the process, so the
    # first cells are not charged for cold caches and clock ramp-up
    prepared = _run_cells(cells, lambda n, m: _density_prepare(n, m, seed, cap), parallel)
    timed = [(n, m, arms) for (n, m), arms in zip(cells, prepared)]
    out = _run_cells(timed, lambda n, m, arms: _density_time(n, m, arms, replicates), parallel)
    result = BenchResult("density", parallel=parallel)
    for rows, skipped in out:
        result.rows.extend(rows)
        result.skipped.extend(skipped)
    return result


def default_init(Y):
    """Data-scaled starting point for the stationary Gaussian model."""
    ybar = Y.mean(axis=1)
    resid = Y - ybar[:, None]
    floor = 1e-6
    return np.array([
        np.log(0.1),
        np.log(max(ybar.var(), floor)),
        np.log(0.1),
        np.log(max(resid.var(), floor)),
        np.log(max(0.1 * Y.var(), floor)),
    ])


def _map_cell(n, m, replicates, seed):
    times, failed = [], 0
    # warm-up on the first dataset, not recorded
    first = simulate_gaussian(n, m, np.random.default_rng([seed, n, m, 0]))
    fit_map(GaussianModel.stationary(first.x, first.Y), default_init(first.Y))
    for rep in range(replicates):
        sim = simulate_gaussian(n, m, np.random.default_rng([seed, n, m, rep]))
        model = GaussianModel.stationary(sim.x, sim.Y)
        t0 = time.perf_counter()
        try:
            fit_map(model, default_init(sim.Y))
        except OptimizerDiverged:
            failed += 1
            continue
        times.append(time.perf_counter() - t0)
    row = BenchRow(n, m, RQK_CHOLESKY, float(np.median(times)), len(times)) if times else None
    return row, failed


def bench_map(ns, ms, replicates=MIN_REPLICATES, seed=0, parallel=False):
    """Time ``fit_map`` end to end on fresh simulated datasets per cell.

    Diverged replicates are excluded from the median and counted in
    ``failures``.
    """
    if replicates < MIN_REPLICATES:
        raise ValueError(f"at least {MIN_REPLICATES} replicates are required")
    cells = [(n, m) for n in ns for m in ms]
    out = _run_cells(cells, lambda n, m: _map_cell(n, m, replicates, seed), parallel)
    result = BenchResult("map", parallel=parallel)
    for (n, m), (row, failed) in zip(cells, out):
        if row is not None:
            result.rows.append(row)
        if failed:
            result.failures[f"{n},{m}"] = failed
    return result


def fit_slopes(rows):
    """Least-squares slope of log(median time) against log(m), per method and n."""
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.n), []).append(r)
    out = []
    for (method, n), rs in sorted(groups.items()):
        if len(rs) < 2:
            continue
        lm = np.log([r.m for r in rs])
        lt = np.log([r.median_seconds for r in rs])
        out.append({"method": method, "n": n, "slope_m": float(np.polyfit(lm, lt, 1)[0]), "points": len(rs)})
    return out


def write_csv(result, path):
    with open(path, "w", newline="") as fh:
        fh.write("n,m,method,median_seconds,replicates\n")
        for r in result.rows:
            fh.write(f"{r.n},{r.m},{r.method},{r.median_seconds!r},{r.replicates}\n")


def summary(result):
    out = {
        "format": "rqk-bench",
        "format_version": FORMAT_VERSION,
        "kind": result.kind,
        "slopes": result.slopes(),
        "skipped": [{"n": n, "m": m, "method": k} for n, m, k in result.skipped],
        "failures": result.failures,
        "parallel": result.parallel,
    }
    if result.parallel:
        out["note"] = "cells were timed concurrently; runtimes include contention"
    return out
