"""Synthetic datasets with known truth."""

from dataclasses import dataclass

import numpy as np

from . import core
from .kernels import Grid, KernelSpec, build_kernel_matrix


@dataclass
class GaussianSim:
    x: np.ndarray
    Y: np.ndarray
    f: np.ndarray
    G: np.ndarray
    w: np.ndarray
    sigma: float


def mean_function(x):
    return np.sin(12.0 * x) + np.sin(24.0 * x)


def simulate_gaussian(n, m, rng, sigma=1.0):
    """Joint-smoothing recipe on a regular grid in (0, 1).

    ``g_i = f + w_i1 cos(6x) + w_i2 cos(3x)`` with ``w_ik ~ N(0, 4)`` and
    ``y_ij = g_i(x_j) + N(0, sigma^2)``.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = Grid.regular(n).points
    f = mean_function(x)
    w = rng.normal(0.0, 2.0, size=(m, 2))
    G = f[:, None] + np.outer(np.cos(6.0 * x), w[:, 0]) + np.outer(np.cos(3.0 * x), w[:, 1])
    Y = G + sigma * rng.standard_normal((n, m)) if sigma > 0 else G.copy()
    return GaussianSim(x, Y, f, G, w, sigma)


# log-scale (ell_f, var_f, ell_d, var_d)
POISSON_THETA = (np.log(0.1), np.log(0.5), np.log(0.2), np.log(0.1))


@dataclass
class PoissonSim:
    t: np.ndarray
    counts: np.ndarray
    delta: float
    log_base: float
    f: np.ndarray
    log_rate: np.ndarray
    theta: np.ndarray


def simulate_poisson(n, m, rng, delta=0.02, base_rate=50.0, theta=POISSON_THETA):
    """Counts from the two-level log-Gaussian Cox model.

    ``f`` and the deviations are Matern 5/2 draws obtained by correlating
    white noise with the prior square root; the log intensity of trial i
    is ``log(base_rate) + f + d_i``.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    if not delta > 0 or not base_rate > 0:
        raise ValueError("delta and base_rate must be positive")
    theta = np.asarray(theta, dtype=float)
    grid = Grid.regular(n)
    K = build_kernel_matrix(KernelSpec.matern52(0, 1), theta, grid)
    A = build_kernel_matrix(KernelSpec.matern52(2, 3), theta, grid)
    zero = np.zeros((n, n))
    f = core.correlate(core.rqk_factor(core.RqkMatrix(K, zero, 1)), rng.standard_normal(n))
    # the deviations are i.i.d., so their joint covariance is rQK(A, 0)
    d = core.correlate(core.rqk_factor(core.RqkMatrix(A, zero, m)), rng.standard_normal(n * m))
    log_base = float(np.log(base_rate))
    log_rate = log_base + f[:, None] + core.stack(d, m, n).T
    counts = rng.poisson(delta * np.exp(log_rate))
    return PoissonSim(grid.points, counts, delta, log_base, log_base + f, log_rate, theta)
