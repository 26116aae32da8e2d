"""Exact inference for the two-level model with Gaussian observations.

``y_ij = g_i(x_j) + eps_ij`` with ``g_i = f + d_i``, ``f ~ GP(0, k_f)``,
``d_i ~ GP(0, k_d)`` and ``eps ~ N(0, sigma^2)``. The covariance of
``vec(Y)`` is ``rQK(A + sigma^2 I, K)``, so the likelihood, its gradient and
both conditional regressions cost ``O(n^3 + mn^2)``.

Hyperparameter layout for :meth:`GaussianModel.stationary`:
``(log_ell_f, log_var_f, log_ell_d, log_var_d, log_noise)``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from . import core
from .errors import (
    DimensionMismatch,
    EmptyMixture,
    NonFiniteObjective,
    NotPositiveDefinite,
    OptimizerDiverged,
    SingularMatrix,
)
from .kernels import DEFAULT_JITTER, Grid, Hyperparams, KernelSpec, as_grid, kernel_matrix_and_grads, theta_values
from .optim import Objective, OptimResult, lbfgs

STATIONARY_NAMES = ("log_ell_f", "log_var_f", "log_ell_d", "log_var_d", "log_noise")


@dataclass(frozen=True)
class GaussianModel:
    kernel_f: KernelSpec
    kernel_d: KernelSpec
    grid: Grid
    data: np.ndarray
    noise_index: int
    names: tuple = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        grid = as_grid(self.grid)
        Y = np.array(self.data, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[0] != len(grid):
            raise DimensionMismatch(f"data must be n x m with n={len(grid)}, got {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise ValueError("data must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", Y)
        used = set(self.kernel_f.theta_indices) | set(self.kernel_d.theta_indices) | {self.noise_index}
        n_params = max(used) + 1
        names = self.names or tuple(f"theta{i}" for i in range(n_params))
        if len(names) < n_params:
            raise DimensionMismatch("fewer names than hyperparameters")
        object.__setattr__(self, "names", tuple(names))

    @classmethod
    def stationary(cls, grid, data, jitter=DEFAULT_JITTER):
        """Matern 5/2 for both levels, with the fixed five-entry layout."""
        return cls(KernelSpec.matern52(0, 1), KernelSpec.matern52(2, 3), grid, data, 4, STATIONARY_NAMES, jitter)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def m(self):
        return self.data.shape[1]

    @property
    def n_params(self):
        return len(self.names)

    @property
    def y(self):
        return self.data.T.reshape(-1)

    def hyperparams(self, values):
        return Hyperparams(values, self.names)

    def check_theta(self, theta):
        th = theta_values(theta)
        if th.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} hyperparameters, got {th.shape}")
        return th


def _prior_blocks(model, th):
    """K, A' = A + sigma^2 I and their derivative dictionaries."""
    K, dK = kernel_matrix_and_grads(model.kernel_f, th, model.grid, model.jitter)
    A, dA = kernel_matrix_and_grads(model.kernel_d, th, model.grid, model.jitter)
    s2 = np.exp(th[model.noise_index])
    A[np.diag_indices_from(A)] += s2
    dA.setdefault(model.noise_index, np.zeros_like(A))
    dA[model.noise_index] = dA[model.noise_index] + s2 * np.eye(model.n)
    return K, dK, A, dA


def _root_inverse(root, n):
    return root.solve(root.t_solve(np.eye(n)))


def marginal_loglik_and_grad(model, theta, method=core.CHOLESKY):
    th = model.check_theta(theta)
    K, dK, A, dA = _prior_blocks(model, th)
    F = core.rqk_factor(core.RqkMatrix(A, K, model.m), method)
    y = model.y
    value = core.rqk_logdensity(F, y)
    n, m = model.n, model.m
    alpha = core.stack(core.rqk_solve(F, y), m, n)
    outer = alpha.T @ alpha
    total = alpha.sum(axis=0)
    head_inv = _root_inverse(F.head, n)
    tail_inv = _root_inverse(F.tail, n)
    grad = np.zeros(model.n_params)
    zero = np.zeros((n, n))
    for j in set(dK) | set(dA):
        dAj = dA.get(j, zero)
        dKj = dK.get(j, zero)
        quad = np.sum(outer * dAj) + total @ dKj @ total
        trace = np.sum(head_inv * (dAj + m * dKj)) + (m - 1) * np.sum(tail_inv * dAj)
        grad[j] = 0.5 * (quad - trace)
    return value, grad


def marginal_loglik(model, theta, method=core.CHOLESKY):
    th = model.check_theta(theta)
    K, _, A, _ = _prior_blocks(model, th)
    F = core.rqk_factor(core.RqkMatrix(A, K, model.m), method)
    return core.rqk_logdensity(F, model.y)


def marginal_loglik_grad(model, theta, method=core.CHOLESKY):
    return marginal_loglik_and_grad(model, theta, method)[1]


# ---------------------------------------------------------------------------
# conditional regressions


@dataclass
class ConditionalPosterior:
    """Gaussian conditional of f (``kind="dense"``) or of g (``kind="rqk"``).

    ``precision`` is an n x n array or an :class:`RqkMatrix`; ``cov`` has
    the same kind. ``rhs`` is the vector with ``precision @ mean == rhs``.
    """

    mean: np.ndarray
    precision_kind: str
    precision: object
    cov: object
    rhs: np.ndarray

    @property
    def sd(self):
        if self.precision_kind == "dense":
            return np.sqrt(np.diag(self.cov))
        m = self.cov.m
        return np.tile(np.sqrt(np.diag(self.cov.A + self.cov.K)), m)


def _chol_inv(M, which):
    try:
        c = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError:
        raise SingularMatrix(f"{which} is not positive definite") from None
    return scipy.linalg.cho_solve(c, np.eye(M.shape[0]))


def posterior_f(model, theta):
    """p(f | y, theta).

    Only the column mean of Y matters: it is ``N(f, A'/m)``. The mean is
    computed as ``K (K + A'/m)^{-1} ybar``, which equals
    ``Q_f^{-1} A'^{-1} sum_i y_i`` without inverting K.
    """
    th = model.check_theta(theta)
    K, _, A, _ = _prior_blocks(model, th)
    m = model.m
    ybar = model.data.mean(axis=1)
    C = K + A / m
    try:
        cf = scipy.linalg.cho_factor(C)
    except np.linalg.LinAlgError:
        raise SingularMatrix("K + A'/m is not positive definite") from None
    mean = K @ scipy.linalg.cho_solve(cf, ybar)
    cov = K - K @ scipy.linalg.cho_solve(cf, K)
    cov = 0.5 * (cov + cov.T)
    Ainv = _chol_inv(A, "A'")
    precision = _chol_inv(K, "K") + m * Ainv
    rhs = Ainv @ model.data.sum(axis=1)
    return ConditionalPosterior(mean, "dense", precision, cov, rhs)


def posterior_g(model, theta):
    """p(g | y, theta), with rQK precision ``Sigma^{-1} + sigma^{-2} I``.

    Mean ``y - sigma^2 (Sigma + sigma^2 I)^{-1} y`` and covariance
    ``sigma^2 I - sigma^4 (Sigma + sigma^2 I)^{-1}``; both reuse the
    factorization behind the marginal likelihood.
    """
    th = model.check_theta(theta)
    K, _, A, _ = _prior_blocks(model, th)
    n, m = model.n, model.m
    s2 = np.exp(th[model.noise_index])
    S_obs = core.RqkMatrix(A, K, m)
    F = core.rqk_factor(S_obs)
    y = model.y
    mean = y - s2 * core.rqk_solve(F, y)
    obs_inv = core.rqk_inverse(S_obs)
    cov = core.RqkMatrix(s2 * np.eye(n) - s2 * s2 * obs_inv.A, -s2 * s2 * obs_inv.K, m)
    prior = core.RqkMatrix(A - s2 * np.eye(n), K, m)
    prec = core.rqk_inverse(prior)
    precision = core.RqkMatrix(prec.A + np.eye(n) / s2, prec.K, m)
    return ConditionalPosterior(mean, "rqk", precision, cov, y / s2)


# ---------------------------------------------------------------------------
# hyperparameter fitting


def gaussian_log_prior(mean, sd):
    """Independent normal log-prior on log-scale hyperparameters."""
    mean = np.asarray(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)

    def log_prior(th):
        z = (th - mean) / sd
        return float(-0.5 * z @ z - np.sum(np.log(sd)) - 0.5 * z.size * np.log(2 * np.pi)), -z / sd

    return log_prior


@dataclass
class MapFit:
    theta: Hyperparams
    cov: np.ndarray
    log_post: float
    result: OptimResult

    def __iter__(self):
        return iter((self.theta, self.cov))


def _log_post(model, prior):
    def f(th):
        v, g = marginal_loglik_and_grad(model, th)
        if prior is not None:
            pv, pg = prior(th)
            v, g = v + pv, g + pg
        return v, g

    return f


def _minimize_negated(fun, init, free, tol, max_iter, ftol):
    """Maximize ``fun`` over the ``free`` coordinates with L-BFGS."""
    init = np.array(init, dtype=float)

    def neg(z):
        th = init.copy()
        th[free] = z
        try:
            v, g = fun(th)
        except (np.linalg.LinAlgError, FloatingPointError):
            return np.inf, np.full(z.size, np.nan)
        if not np.isfinite(v):
            return np.inf, np.full(z.size, np.nan)
        return -v, -g[free]

    try:
        res = lbfgs(Objective(neg, int(free.sum())), init[free], tol=tol, max_iter=max_iter, ftol=ftol)
    except NonFiniteObjective as exc:
        raise OptimizerDiverged(str(exc)) from None
    theta = init.copy()
    theta[free] = res.x_opt
    if not np.all(np.isfinite(theta)) or not np.isfinite(res.value):
        raise OptimizerDiverged("optimizer produced non-finite hyperparameters")
    return theta, res


def fd_hessian(grad_fun, theta, free=None):
    """Symmetrized central-difference Hessian of an analytic gradient.

    Step ``1e-4 * max(1, |theta_j|)``.
    """
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    free = np.ones(d, bool) if free is None else free
    idx = np.flatnonzero(free)
    H = np.zeros((idx.size, idx.size))
    for a, j in enumerate(idx):
        h = 1e-4 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, a] = (grad_fun(tp)[idx] - grad_fun(tm)[idx]) / (2 * h)
    return 0.5 * (H + H.T)


def laplace_covariance(neg_hessian):
    """Inverse of the negative Hessian, with eigenvalues floored if not SPD."""
    lam, Q = np.linalg.eigh(neg_hessian)
    floor = max(1e-8 * np.max(np.abs(lam)), 1e-12) if lam.size else 1.0
    lam = np.maximum(lam, floor)
    return (Q / lam) @ Q.T


def fit_map(model, init, prior: Optional[Callable] = None, fixed=None, tol=1e-6, max_iter=500, ftol=1e-13):
    """Maximum-likelihood (or MAP, with ``prior``) hyperparameters.

    ``prior(theta) -> (log p(theta), gradient)``. ``fixed`` is a boolean
    mask or index list of hyperparameters held at their ``init`` values.
    Returns a :class:`MapFit`; unpacks as ``(theta, cov)``. The value
    tolerance is tighter than the optimizer default because log-likelihoods
    in the thousands otherwise stop with gradients around 1e-3.
    """
    init = model.check_theta(init)
    free = np.ones(model.n_params, bool)
    if fixed is not None:
        fixed = np.asarray(fixed)
        free[fixed if fixed.dtype != bool else np.flatnonzero(fixed)] = False
    fun = _log_post(model, prior)
    theta, res = _minimize_negated(fun, init, free, tol, max_iter, ftol)
    H = fd_hessian(lambda t: fun(t)[1], theta, free)
    cov = np.zeros((model.n_params, model.n_params))
    cov[np.ix_(free, free)] = laplace_covariance(-H)
    return MapFit(model.hyperparams(theta), cov, -res.value, res)


# ---------------------------------------------------------------------------
# MCMC


@dataclass
class PosteriorSamples:
    thetas: np.ndarray
    acceptance_rate: float
    log_posts: np.ndarray
    names: tuple = field(default=None)
    n_accepted: int = 0
    n_total: int = 0


def metropolis_hastings(log_target, x0, proposal_cov, n_samples, n_burn=0, seed=0, scale=None):
    """Random-walk Metropolis with proposal ``N(0, scale * proposal_cov)``.

    ``scale`` defaults to ``2.38^2 / dim``. Targets that raise a linear
    algebra error or return a non-finite value reject the proposal.
    ``acceptance_rate`` counts post-burn-in iterations only.
    """
    x = np.array(x0, dtype=float).reshape(-1)
    d = x.size
    cov = np.atleast_2d(np.asarray(proposal_cov, dtype=float))
    scale = 2.38**2 / d if scale is None else scale
    L = np.linalg.cholesky(scale * cov)
    rng = np.random.default_rng(seed)

    def evaluate(t):
        try:
            v = float(log_target(t))
        except (np.linalg.LinAlgError, FloatingPointError):
            return -np.inf
        return v if np.isfinite(v) else -np.inf

    lp = evaluate(x)
    if not np.isfinite(lp):
        raise ValueError("log target is not finite at the starting point")
    out = np.empty((n_samples, d))
    lps = np.empty(n_samples)
    accepted = 0
    for it in range(n_burn + n_samples):
        prop = x + L @ rng.standard_normal(d)
        lq = evaluate(prop)
        if np.log(rng.uniform()) < lq - lp:
            x, lp = prop, lq
            if it >= n_burn:
                accepted += 1
        if it >= n_burn:
            out[it - n_burn] = x
            lps[it - n_burn] = lp
    rate = accepted / n_samples if n_samples else 0.0
    return PosteriorSamples(out, rate, lps, None, accepted, n_samples)


def mh_sample(model, theta_star, proposal_cov, n_samples, n_burn=0, seed=0, prior=None, fixed=None):
    """Metropolis-Hastings over hyperparameters started at ``theta_star``."""
    start = model.check_theta(theta_star)
    free = np.ones(model.n_params, bool)
    if fixed is not None:
        free[np.asarray(fixed)] = False
    cov = np.asarray(proposal_cov, dtype=float)[np.ix_(free, free)]

    def log_target(z):
        th = start.copy()
        th[free] = z
        v = marginal_loglik(model, th)
        if prior is not None:
            v += prior(th)[0]
        return v

    s = metropolis_hastings(log_target, start[free], cov, n_samples, n_burn, seed)
    thetas = np.tile(start, (n_samples, 1))
    thetas[:, free] = s.thetas
    s.thetas = thetas
    s.names = model.names
    return s


# ---------------------------------------------------------------------------
# bands


@dataclass
class ConfidenceBand:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float


def _mixture_quantile(means, sds, p, tol, max_iter=200):
    mu = means.mean(axis=0)
    pooled = np.sqrt(np.maximum((sds**2 + means**2).mean(axis=0) - mu**2, 0.0))
    pooled = np.where(pooled > 0, pooled, 1.0)
    lo = mu - 10.0 * pooled
    hi = mu + 10.0 * pooled
    mid = 0.5 * (lo + hi)
    safe = np.where(sds > 0, sds, np.inf)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        cdf = ndtr((mid - means) / safe).mean(axis=0)
        if np.all(np.abs(cdf - p) < tol):
            break
        below = cdf < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return mid


def confidence_band(conditional_means, conditional_sds, alpha=0.05, tol=1e-6):
    """Pointwise band from an equal-weight mixture of Gaussians.

    Component ``k`` at grid point ``j`` is ``N(means[k][j], sds[k][j]^2)``;
    the band inverts the mixture CDF at ``alpha/2`` and ``1 - alpha/2``.
    """
    means = np.atleast_2d(np.asarray(conditional_means, dtype=float))
    sds = np.atleast_2d(np.asarray(conditional_sds, dtype=float))
    if means.size == 0 or len(conditional_means) == 0:
        raise EmptyMixture("at least one mixture component is required")
    if means.shape != sds.shape:
        raise DimensionMismatch("means and sds must have the same shape")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lower = _mixture_quantile(means, sds, alpha / 2, tol)
    upper = _mixture_quantile(means, sds, 1 - alpha / 2, tol)
    return ConfidenceBand(lower, upper, alpha)


def rao_blackwell_f_band(model, thetas, alpha=0.05):
    """Band for f averaging the conditional posteriors over sampled thetas."""
    means, sds = [], []
    for th in thetas:
        post = posterior_f(model, th)
        means.append(post.mean)
        sds.append(post.sd)
    return confidence_band(means, sds, alpha), np.mean(means, axis=0)
