"""Stationary covariance functions on 1-D grids.

All hyperparameters live on the log scale: for each constituent kernel
``theta1`` is the log length-scale and ``theta2`` the log marginal
variance. Kernels do not own their parameters; a :class:`KernelSpec`
only records *which* entries of a shared hyperparameter vector it reads,
so several kernels (and the noise variance) can be optimized jointly.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _accel
from .errors import DimensionMismatch, PositiveDefiniteViolation

DEFAULT_JITTER = 1e-8


class Family(str, enum.Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"
    MATERN52 = "matern52"
    MASKED_SUM = "masked_sum"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus the positions of its parameters in ``theta``.

    For ``MASKED_SUM`` the four indices are ``(a1, a2, b1, b2)`` and the
    covariance is ``k_a(t, t') + m(t) m(t') k_b(t, t')`` with the fixed mask
    ``m(t) = exp(-(t - t0)^2 / s_t^2)``. ``base`` is the family of both
    constituents.
    """

    family: Family
    theta_indices: tuple
    mask_params: tuple = None
    base: Family = Family.MATERN52

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "base", Family(self.base))
        idx = tuple(int(i) for i in self.theta_indices)
        object.__setattr__(self, "theta_indices", idx)
        want = 4 if self.family is Family.MASKED_SUM else 2
        if len(idx) != want:
            raise ValueError(f"{self.family.value} needs {want} theta indices, got {len(idx)}")
        if len(set(idx)) != len(idx) or min(idx) < 0:
            raise ValueError(f"theta indices must be distinct and non-negative: {idx}")
        if self.family is Family.MASKED_SUM:
            if self.base is Family.MASKED_SUM:
                raise ValueError("masked sum constituents must be stationary kernels")
            if self.mask_params is None or len(self.mask_params) != 2:
                raise ValueError("masked sum needs mask_params=(t0, s_t)")
            t0, s_t = (float(v) for v in self.mask_params)
            if not s_t > 0:
                raise ValueError("mask width s_t must be positive")
            object.__setattr__(self, "mask_params", (t0, s_t))
        elif self.mask_params is not None:
            raise ValueError("mask_params only apply to masked sums")

    @classmethod
    def matern52(cls, i1, i2):
        return cls(Family.MATERN52, (i1, i2))

    @classmethod
    def squared_exponential(cls, i1, i2):
        return cls(Family.SQUARED_EXPONENTIAL, (i1, i2))

    @classmethod
    def masked_sum(cls, a_indices, b_indices, t0=0.3, s_t=0.2, base=Family.MATERN52):
        return cls(Family.MASKED_SUM, tuple(a_indices) + tuple(b_indices), (t0, s_t), base)

    @property
    def variance_index(self):
        """Index of the log-variance the jitter is scaled by."""
        return self.theta_indices[1]

    def check_bound(self, theta):
        if max(self.theta_indices) >= len(theta):
            raise DimensionMismatch(
                f"kernel reads theta[{max(self.theta_indices)}] but theta has {len(theta)} entries"
            )

    def to_dict(self):
        d = {"family": self.family.value, "theta_indices": list(self.theta_indices)}
        if self.family is Family.MASKED_SUM:
            d["mask_params"] = list(self.mask_params)
            d["base"] = self.base.value
        return d


@dataclass
class Hyperparams:
    """Named log-scale hyperparameter vector."""

    values: np.ndarray
    names: tuple = field(default=None)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float).reshape(-1)
        if self.names is None:
            self.names = tuple(f"theta{i}" for i in range(len(self.values)))
        self.names = tuple(self.names)
        if len(self.names) != len(self.values):
            raise DimensionMismatch("one name per hyperparameter is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("hyperparameters must be finite")

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def with_values(self, values):
        return Hyperparams(values, self.names)

    def as_dict(self):
        return {k: float(v) for k, v in zip(self.names, self.values)}

    @classmethod
    def from_dict(cls, d, names):
        return cls([d[k] for k in names], names)


@dataclass(frozen=True)
class Grid:
    """Strictly increasing sampling locations shared by every function."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1)
        if p.size < 1:
            raise ValueError("grid needs at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("grid points must be finite")
        if np.any(np.diff(p) <= 0):
            raise ValueError("grid must be strictly increasing")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.size

    @classmethod
    def regular(cls, n, lo=0.0, hi=1.0):
        """``n`` cell-centred points strictly inside ``(lo, hi)``."""
        return cls(lo + (np.arange(n) + 0.5) * (hi - lo) / n)


def as_grid(grid):
    return grid if isinstance(grid, Grid) else Grid(grid)


def theta_values(theta):
    return theta.values if isinstance(theta, Hyperparams) else np.asarray(theta, dtype=float)


def mask(spec, t):
    t0, s_t = spec.mask_params
    return np.exp(-((np.asarray(t, dtype=float) - t0) ** 2) / s_t**2)


def _stationary_value(family, t1, t2, d):
    if family is Family.MATERN52:
        u = np.sqrt(5.0) * d * np.exp(-t1)
        return (1.0 + u + u * u / 3.0) * np.exp(-u + t2)
    if family is Family.SQUARED_EXPONENTIAL:
        return np.exp(-np.exp(-t1) * d * d / 2.0 + t2)
    raise ValueError(f"not a stationary family: {family}")


def kernel_value(spec, theta, x, xp):
    """Covariance between two scalar inputs."""
    th = theta_values(theta)
    spec.check_bound(th)
    d = abs(float(x) - float(xp))
    i = spec.theta_indices
    if spec.family is Family.MASKED_SUM:
        ka = _stationary_value(spec.base, th[i[0]], th[i[1]], d)
        kb = _stationary_value(spec.base, th[i[2]], th[i[3]], d)
        return float(ka + mask(spec, x) * mask(spec, xp) * kb)
    return float(_stationary_value(spec.family, th[i[0]], th[i[1]], d))


def _stationary_parts(family, x, t1, t2):
    if family is Family.MATERN52:
        return _accel.matern52(x, t1, t2)
    if family is Family.SQUARED_EXPONENTIAL:
        return _accel.sqexp(x, t1, t2)
    raise ValueError(f"not a stationary family: {family}")


def kernel_matrix_and_grads(spec, theta, grid, jitter=DEFAULT_JITTER):
    """Kernel matrix and ``{theta index: dK/dtheta}`` for every bound index."""
    th = theta_values(theta)
    spec.check_bound(th)
    x = as_grid(grid).points
    i = spec.theta_indices
    grads = {}
    if spec.family is Family.MASKED_SUM:
        Ka, dKa = _stationary_parts(spec.base, x, th[i[0]], th[i[1]])
        Kb, dKb = _stationary_parts(spec.base, x, th[i[2]], th[i[3]])
        mk = mask(spec, x)
        M = np.outer(mk, mk)
        Kb = M * Kb
        K = Ka + Kb
        grads[i[0]] = dKa
        grads[i[1]] = Ka.copy()
        grads[i[2]] = M * dKb
        grads[i[3]] = Kb
    else:
        K, dK1 = _stationary_parts(spec.family, x, th[i[0]], th[i[1]])
        grads[i[0]] = dK1
        grads[i[1]] = K.copy()
    if jitter:
        j = jitter * np.exp(th[spec.variance_index])
        K[np.diag_indices_from(K)] += j
        grads[spec.variance_index][np.diag_indices_from(K)] += j
    return K, grads


def build_kernel_matrix(spec, theta, grid, jitter=DEFAULT_JITTER):
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    return kernel_matrix_and_grads(spec, theta, grid, jitter)[0]


def kernel_matrix_grad(spec, theta, grid, j, jitter=DEFAULT_JITTER):
    """Entrywise derivative of the kernel matrix with respect to ``theta[j]``.

    Zero if the kernel does not read ``theta[j]``.
    """
    _, grads = kernel_matrix_and_grads(spec, theta, grid, jitter)
    if j in grads:
        return grads[j]
    n = len(as_grid(grid))
    return np.zeros((n, n))


def cholesky(K, which="K"):
    """Upper Cholesky factor, raising :class:`PositiveDefiniteViolation`."""
    try:
        return scipy.linalg.cholesky(K, lower=False, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise PositiveDefiniteViolation(which, f"{which} failed Cholesky: {exc}") from None
