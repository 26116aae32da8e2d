"""Poisson latent Gaussian model with a Laplace-approximated likelihood.

The latent field ``x = vec(G)`` has the two-level prior ``N(0, rQK(A, K))``
and ``y_ij ~ Poi(delta * exp(offset_ij + x_ij))``. ``offset`` is data (a
known log baseline rate, zero by default). The negative Hessian of the log
posterior, ``W + Sigma^{-1}``, is a QK matrix, so Newton steps and its
log-determinant cost ``O(mn^3)``.

Layouts: stationary ``(log_ell_f, log_var_f, log_ell_d, log_var_d)``;
nonstationary ``(log_ell_a, log_var_a, log_ell_b, log_var_b, log_ell_d,
log_var_d)`` with ``f = a + mask * b``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import _accel, core
from .errors import (
    DimensionMismatch,
    MaxIterExceeded,
    NonConcave,
    NonFiniteObjective,
    NonSPDHessian,
    OptimizerDiverged,
)
from .gaussian import ConfidenceBand, confidence_band, fd_hessian, laplace_covariance
from .kernels import DEFAULT_JITTER, Grid, Hyperparams, KernelSpec, as_grid, kernel_matrix_and_grads, theta_values
from .optim import Objective, lbfgs

STATIONARY_NAMES = ("log_ell_f", "log_var_f", "log_ell_d", "log_var_d")
NONSTATIONARY_NAMES = ("log_ell_a", "log_var_a", "log_ell_b", "log_var_b", "log_ell_d", "log_var_d")
LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# likelihoods


class PoissonLikelihood:
    name = "poisson"

    def validate(self, Y):
        if np.any(Y < 0) or np.any(Y != np.round(Y)):
            raise ValueError("counts must be non-negative integers")

    def terms(self, Y, eta, delta):
        """``(loglik, grad, w, third, clamped)`` at linear predictor ``eta``."""
        y = Y.reshape(-1)
        ll, grad, mu, clamped = _accel.poisson(eta, y, delta)
        # the kernel drops the eta-free terms y log(delta) - log(y!)
        ll += float(np.sum(y)) * np.log(delta) - float(np.sum(gammaln(y + 1.0)))
        return ll, grad, mu, -mu, clamped

    def initial(self, Y, delta, offset):
        return np.log((Y.reshape(-1) + 0.5) / delta) - offset


@dataclass(frozen=True)
class GaussianLikelihood:
    """``y ~ N(eta, noise_var)``: makes the Laplace approximation exact."""

    noise_var: float
    name = "gaussian"

    def validate(self, Y):
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")

    def terms(self, Y, eta, delta):
        r = Y.reshape(-1) - eta
        s2 = self.noise_var
        ll = -0.5 * float(r @ r) / s2 - 0.5 * r.size * np.log(2 * np.pi * s2)
        w = np.full(r.size, 1.0 / s2)
        return ll, r / s2, w, np.zeros(r.size), False

    def initial(self, Y, delta, offset):
        return Y.reshape(-1) - offset


class ZeroLikelihood:
    """Data-free likelihood: the posterior is the prior."""

    name = "zero"

    def validate(self, Y):
        pass

    def terms(self, Y, eta, delta):
        z = np.zeros(eta.size)
        return 0.0, z, z.copy(), z.copy(), False

    def initial(self, Y, delta, offset):
        return np.zeros(Y.size)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class PoissonModel:
    kernel_f: KernelSpec
    kernel_d: KernelSpec
    grid: Grid
    counts: np.ndarray
    bin_width: float
    offset: object = 0.0
    likelihood: object = None
    names: tuple = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        grid = as_grid(self.grid)
        Y = np.array(self.counts, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[0] != len(grid):
            raise DimensionMismatch(f"counts must be n x m with n={len(grid)}, got {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise ValueError("counts must be finite")
        if not self.bin_width > 0:
            raise ValueError("bin width must be positive")
        lik = self.likelihood if self.likelihood is not None else PoissonLikelihood()
        lik.validate(Y)
        off = np.broadcast_to(np.asarray(self.offset, dtype=float), Y.shape)
        if not np.all(np.isfinite(off)):
            raise ValueError("offset must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "counts", Y)
        object.__setattr__(self, "likelihood", lik)
        object.__setattr__(self, "offset", off.T.reshape(-1).copy())
        used = set(self.kernel_f.theta_indices) | set(self.kernel_d.theta_indices)
        names = self.names or tuple(f"theta{i}" for i in range(max(used) + 1))
        object.__setattr__(self, "names", tuple(names))

    @classmethod
    def stationary(cls, grid, counts, bin_width, offset=0.0, likelihood=None, jitter=DEFAULT_JITTER):
        return cls(
            KernelSpec.matern52(0, 1), KernelSpec.matern52(2, 3), grid, counts, bin_width,
            offset, likelihood, STATIONARY_NAMES, jitter,
        )

    @classmethod
    def nonstationary(cls, grid, counts, bin_width, t0=0.3, s_t=0.2, offset=0.0, likelihood=None,
                      jitter=DEFAULT_JITTER):
        return cls(
            KernelSpec.masked_sum((0, 1), (2, 3), t0, s_t), KernelSpec.matern52(4, 5), grid, counts,
            bin_width, offset, likelihood, NONSTATIONARY_NAMES, jitter,
        )

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def m(self):
        return self.counts.shape[1]

    @property
    def n_params(self):
        return len(self.names)

    def check_theta(self, theta):
        th = theta_values(theta)
        if th.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} hyperparameters, got {th.shape}")
        return th

    def initial_latent(self):
        """Moment-matched start; ``log((Y + 0.5) / delta) - offset`` for counts."""
        x0 = self.likelihood.initial(self.counts.T, self.bin_width, self.offset)
        return np.minimum(x0, _accel.CLAMP)


def poisson_terms(model, x):
    """``(loglik, grad, neg_hess_diag, third_diag)`` of the likelihood at ``x``.

    Use :func:`poisson_terms_flagged` to also learn whether the overflow
    clamp was hit.
    """
    return poisson_terms_flagged(model, x)[:4]


def poisson_terms_flagged(model, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.n * model.m:
        raise DimensionMismatch(f"latent vector must have length {model.n * model.m}")
    return model.likelihood.terms(model.counts.T, model.offset + x, model.bin_width)


# ---------------------------------------------------------------------------
# prior pieces


W_FLOOR = 1e-150


@dataclass
class _Prior:
    S: core.RqkMatrix
    F: core.RqkFactor
    dK: dict
    dA: dict

    @property
    def S_inv(self):
        if not hasattr(self, "_S_inv"):
            self._S_inv = core.rqk_inverse(self.S)
        return self._S_inv


def _prior(model, th):
    K, dK = kernel_matrix_and_grads(model.kernel_f, th, model.grid, model.jitter)
    A, dA = kernel_matrix_and_grads(model.kernel_d, th, model.grid, model.jitter)
    S = core.RqkMatrix(A, K, model.m)
    return _Prior(S, core.rqk_factor(S), dK, dA)


def _smul(S, X):
    """``S @ X`` for a vector or an (mn, k) matrix."""
    Xs = X.reshape(S.m, S.n, -1)
    out = S.A @ Xs + (S.K @ Xs.sum(axis=0))[None]
    return out.reshape(X.shape)


class _Dual:
    """``Q = Sigma + W^{-1}``, a QK matrix with blocks ``A + W_i^{-1}``.

    Everything about the negative Hessian ``H = W + Sigma^{-1}`` is read off
    ``Q`` without forming ``Sigma^{-1}``, whose rQK parts cancel badly for
    smooth kernels:
    ``H^{-1} = Sigma - Sigma Q^{-1} Sigma`` and
    ``log det H = -log det Sigma + sum log w + log det Q``.
    """

    def __init__(self, S, w):
        if np.any(w < 0):
            raise NonConcave("likelihood curvature is negative")
        self.S = S
        self.w = np.maximum(w, W_FLOOR)
        self.Qf = core.QkFactor(core.QkMatrix.from_rqk(S, 1.0 / self.w))
        if self.Qf.sign != 1.0:
            raise NonSPDHessian("Sigma + W^{-1} is not positive definite")

    def logdet_h(self, F):
        return -core.rqk_logdet(F) + float(np.sum(np.log(self.w))) + self.Qf.logabsdet

    def h_solve(self, b):
        Sb = _smul(self.S, b)
        return Sb - _smul(self.S, self.Qf.solve(Sb))

    def h_diag(self):
        """Diagonal of ``H^{-1}``, block by block, in ``O(mn^3)``."""
        A, K = self.S.A, self.S.K
        Qd = self.Qf.diag_blocks()
        R = self.Qf.block_row_sums()
        KSK = np.sum((K @ self.Qf.block_sum()) * K, axis=1)
        AQA = np.sum((A @ Qd) * A, axis=2)
        ARK = np.sum((A @ R) * K, axis=2)
        base = np.diag(A) + np.diag(K)
        return (base[None] - AQA - 2.0 * ARK - KSK[None]).reshape(-1)


@dataclass
class ModeResult:
    x_star: np.ndarray
    logpost_at_mode: float
    iterations: int
    grad_norm: float
    a_star: np.ndarray
    w: np.ndarray
    clamped: bool = False
    method: str = "newton"
    converged: bool = True
    prior: object = None
    _dual: object = None

    @property
    def hessian(self):
        """Negative Hessian ``W + Sigma^{-1}`` as a QK matrix."""
        return core.QkMatrix.from_rqk(self.prior.S_inv, self.w)

    def factor(self):
        return core.QkFactor(self.hessian)

    @property
    def dual(self):
        if self._dual is None:
            self._dual = _Dual(self.prior.S, self.w)
        return self._dual


def _x0(model, x0):
    x = model.initial_latent() if x0 is None else np.array(x0, dtype=float).reshape(-1)
    if x.size != model.n * model.m:
        raise DimensionMismatch("x0 has the wrong length")
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    return x


def _state(model, prior, a, x=None):
    """Log posterior at ``x = Sigma a`` plus the pieces a Newton step needs."""
    x = _smul(prior.S, a) if x is None else x
    ll, g, w, third, clamped = poisson_terms_flagged(model, x)
    value = ll - 0.5 * float(a @ x) - 0.5 * core.rqk_logdet(prior.F) - 0.5 * x.size * LOG_2PI
    return value, x, g, w, clamped


def find_mode_newton(model, theta, x0=None, tol=1e-8, max_iter=100, _prior_cache=None):
    """Newton iterations with a halving line search.

    The iteration is carried in ``a = Sigma^{-1} x``. The Newton iterate
    ``H^{-1}(W x + grad loglik)`` is evaluated as ``Sigma (b - Q^{-1} Sigma b)``
    with the QK matrix ``Q = Sigma + W^{-1}``, the same step as a QK solve
    against ``H`` but free of the cancellation in ``Sigma^{-1}``.
    Stops when the gradient inf-norm is below ``tol``; if round-off stalls
    the iteration first, ``converged`` is false.
    """
    th = model.check_theta(theta)
    prior = _prior_cache or _prior(model, th)
    S = prior.S
    a = core.rqk_solve(prior.F, _x0(model, x0))
    f, x, g, w, clamped = _state(model, prior, a)
    it = 0
    dual = None
    while True:
        grad = g - a
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        if it >= max_iter:
            raise MaxIterExceeded(f"Newton did not reach tolerance {tol} in {max_iter} iterations (|grad| {gnorm:.3g})")
        dual = _Dual(S, w)
        b = dual.w * x + g
        da = b - dual.Qf.solve(_smul(S, b)) - a
        dx = _smul(S, da)
        if not float(grad @ dx) > 0:
            break
        t = 1.0
        while True:
            fn, xn, gn, wn, cl = _state(model, prior, a + t * da)
            if np.isfinite(fn) and fn >= f - 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
            if t < 1e-10:
                fn = None
                break
        it += 1
        if fn is None:
            break
        an = a + t * da
        stalled = fn - f <= 1e-15 * max(1.0, abs(f)) and float(np.max(np.abs(gn - an))) >= gnorm
        a, f, x, g, w, clamped, dual = an, fn, xn, gn, wn, cl, None
        if stalled:
            break
    gnorm = float(np.max(np.abs(g - a)))
    return ModeResult(x, f, it, gnorm, a, w, clamped, "newton", gnorm < tol, prior, dual)


def precondition_diag(F, w):
    """``1 + diag(G W G^t)``: the Hessian diagonal in whitened coordinates.

    With ``x = G^t z`` the negative log-posterior Hessian in ``z`` is
    ``I + G W G^t``. Entry ``(k, r)`` is
    ``sum_s C_k[r, s]^2 [(B o B) W]_{k, s}`` with ``C_1 = U`` and
    ``C_k = V`` otherwise, so only squared factors and the squared rotation
    appear.
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != F.m * F.n:
        raise DimensionMismatch(f"w must have length {F.m * F.n}")
    Wr = F.rotation.stacked_sq(core.stack(w, F.m, F.n))
    out = np.empty_like(Wr)
    out[0] = (F.U**2) @ Wr[0]
    if F.m > 1:
        out[1:] = Wr[1:] @ (F.V**2).T
    return 1.0 + out.reshape(-1)


def find_mode_qn(model, theta, x0=None, tol=1e-8, max_iter=2000, precondition=True, _prior_cache=None):
    """L-BFGS on the whitened latent ``z`` (``x = G^t z``).

    ``precondition`` uses :func:`precondition_diag` at the starting point
    as the initial inverse-Hessian scaling. ``tol`` applies to the
    gradient in ``z``.
    """
    th = model.check_theta(theta)
    prior = _prior_cache or _prior(model, th)
    F = prior.F
    x_init = _x0(model, x0)
    z0 = core.whiten(F, x_init)
    N = x_init.size
    const = 0.5 * core.rqk_logdet(F) + 0.5 * N * LOG_2PI

    def neg(z):
        x = core.correlate(F, z)
        ll, g, _, _, _ = poisson_terms_flagged(model, x)
        value = -(ll - 0.5 * float(z @ z) - const)
        return value, z - core.factor_mul(F, g)

    d0 = None
    if precondition:
        _, _, w0, _, _ = poisson_terms_flagged(model, x_init)
        d0 = precondition_diag(F, w0)
    try:
        res = lbfgs(Objective(neg, N, d0), z0, tol=tol, max_iter=max_iter, ftol=0.0)
    except NonFiniteObjective as exc:
        raise OptimizerDiverged(str(exc)) from None
    x = core.correlate(F, res.x_opt)
    a = core.factor_solve(F, res.x_opt)
    f, x, g, w, clamped = _state(model, prior, a, x)
    if not np.isfinite(f):
        raise OptimizerDiverged("quasi-Newton mode search produced a non-finite posterior")
    return ModeResult(x, f, res.iterations, float(np.max(np.abs(g - a))), a, w, clamped, "qn",
                      res.converged, prior)


# ---------------------------------------------------------------------------
# Laplace approximation


@dataclass
class LaplaceValue:
    value: float
    mode: ModeResult


def _find_mode(model, th, x0, method, prior):
    if method == "newton":
        return find_mode_newton(model, th, x0, _prior_cache=prior)
    if method == "qn":
        return find_mode_qn(model, th, x0, _prior_cache=prior)
    raise ValueError(f"unknown mode finder {method!r}")


def _laplace_from_mode(mode):
    """``f(x*) + (N/2) log 2pi - 1/2 log det H``."""
    N = mode.x_star.size
    return mode.logpost_at_mode + 0.5 * N * LOG_2PI - 0.5 * mode.dual.logdet_h(mode.prior.F)


def laplace(model, theta, x0=None, method="newton"):
    """Laplace approximation of ``log p(y | theta)``; ``H`` is the negative Hessian."""
    th = model.check_theta(theta)
    prior = _prior(model, th)
    mode = _find_mode(model, th, x0, method, prior)
    return LaplaceValue(_laplace_from_mode(mode), mode)


@dataclass
class LaplaceGradient:
    value: float
    grad: np.ndarray
    mode: ModeResult
    estimator: str


def laplace_value_and_grad(model, theta, x0=None, trace="exact", n_probes=64, seed=0, method="newton"):
    """Laplace value and its hyperparameter gradient.

    With ``a = Sigma^{-1} x*``, ``dx*/dtheta_j = H^{-1} Sigma^{-1} Sigma_j a``
    and the two trace terms collapse to ``tr(Q^{-1} Sigma_j)``, so
    ``grad_j = 1/2 a^t Sigma_j a - 1/2 tr(Q^{-1} Sigma_j)
    - 1/2 sum diag(H^{-1}) * (-third) * dx*/dtheta_j``.
    ``trace="exact"`` reads both traces off the diagonal blocks, block sum
    and row sums of ``Q^{-1}`` (``O(mn^3)``, no probes);
    ``trace="hutchinson"`` estimates them with ``n_probes`` seeded
    Rademacher probes.
    """
    th = model.check_theta(theta)
    prior = _prior(model, th)
    mode = _find_mode(model, th, x0, method, prior)
    dual = mode.dual
    value = _laplace_from_mode(mode)
    n, m = model.n, model.m
    _, _, _, third, _ = poisson_terms_flagged(model, mode.x_star)
    a_st = core.stack(mode.a_star, m, n)
    outer = a_st.T @ a_st
    total = a_st.sum(axis=0)
    if trace == "exact":
        Qd_total = dual.Qf.diag_blocks().sum(axis=0)
        Qsum = dual.Qf.block_sum()
        h = dual.h_diag()
    elif trace == "hutchinson":
        rng = np.random.default_rng(seed)
        R = rng.choice([-1.0, 1.0], size=(m * n, n_probes))
        QinvR = dual.Qf.solve(R)
        HinvR = dual.h_solve(R)
    else:
        raise ValueError(f"unknown trace estimator {trace!r}")
    grad = np.zeros(model.n_params)
    zero = np.zeros((n, n))
    for j in set(prior.dK) | set(prior.dA):
        dAj = prior.dA.get(j, zero)
        dKj = prior.dK.get(j, zero)
        Sj = core.RqkMatrix(dAj, dKj, m)
        quad = np.sum(outer * dAj) + total @ dKj @ total
        b = _smul(Sj, mode.a_star)
        dx = b - _smul(prior.S, dual.Qf.solve(b))
        dw = -third * dx
        if trace == "exact":
            tr_q = np.sum(Qd_total * dAj) + np.sum(Qsum * dKj)
            tr_w = float(h @ dw)
        else:
            tr_q = float(np.sum(QinvR * _smul(Sj, R))) / n_probes
            tr_w = float(np.sum(HinvR * (dw[:, None] * R))) / n_probes
        grad[j] = 0.5 * (quad - tr_q - tr_w)
    return LaplaceGradient(value, grad, mode, trace)


def laplace_grad(model, theta, **kw):
    return laplace_value_and_grad(model, theta, **kw).grad


# ---------------------------------------------------------------------------
# fitting


@dataclass
class LaplaceFit:
    theta: Hyperparams
    value: float
    mode: ModeResult
    result: object
    cov: np.ndarray = None

    def __iter__(self):
        return iter((self.theta, self.cov))


_NUMERICAL = (np.linalg.LinAlgError, MaxIterExceeded, NonConcave, FloatingPointError, OptimizerDiverged)


def fit_laplace_map(model, init, fixed=None, tol=1e-4, max_iter=200, trace="exact", method="newton",
                    covariance=False, seed=0):
    """Maximize the Laplace approximation over the hyperparameters.

    Each mode search is warm-started from the latest mode. ``fixed`` holds
    hyperparameters at their ``init`` values. ``seed`` drives the probes
    when ``trace="hutchinson"``.
    """
    init = model.check_theta(init)
    free = np.ones(model.n_params, bool)
    if fixed is not None:
        free[np.asarray(fixed)] = False
    state = {"x": None}

    def evaluate(th):
        lg = None
        for x0 in (state["x"], None):
            try:
                lg = laplace_value_and_grad(model, th, x0=x0, trace=trace, method=method, seed=seed)
                break
            except _NUMERICAL:
                if x0 is None:
                    return None
        if not np.isfinite(lg.value) or not np.all(np.isfinite(lg.grad)):
            return None
        state["x"] = lg.mode.x_star
        return lg

    def neg(z):
        th = init.copy()
        th[free] = z
        lg = evaluate(th)
        if lg is None:
            return np.inf, np.full(z.size, np.nan)
        return -lg.value, -lg.grad[free]

    try:
        res = lbfgs(Objective(neg, int(free.sum())), init[free], tol=tol, max_iter=max_iter)
    except NonFiniteObjective as exc:
        raise OptimizerDiverged(str(exc)) from None
    theta = init.copy()
    theta[free] = res.x_opt
    final = evaluate(theta)
    if final is None:
        raise OptimizerDiverged("Laplace approximation is not finite at the optimum")
    cov = None
    if covariance:
        H = fd_hessian(lambda t: laplace_value_and_grad(model, t, x0=final.mode.x_star).grad, theta, free)
        cov = np.zeros((model.n_params, model.n_params))
        cov[np.ix_(free, free)] = laplace_covariance(-H)
    return LaplaceFit(Hyperparams(theta, model.names), final.value, final.mode, res, cov)


# ---------------------------------------------------------------------------
# the shared function f under the Laplace posterior


@dataclass
class LatentSummary:
    f_mean: np.ndarray
    f_sd: np.ndarray
    g_mean: np.ndarray
    g_sd: np.ndarray


def latent_summary(model, theta, mode):
    """Laplace-approximation moments of f and of every g_i (linear predictor scale).

    ``E[f | x] = K sum_i (Sigma^{-1} x)_i``. Averaging over
    ``x ~ N(x*, H^{-1})`` gives ``Cov(f) = K - K S_Q K`` where ``S_Q`` sums
    all blocks of ``(Sigma + W^{-1})^{-1}``.
    """
    th = model.check_theta(theta)
    n, m = model.n, model.m
    K = mode.prior.S.K
    Qsum = mode.dual.Qf.block_sum()
    f_mean = K @ core.stack(mode.a_star, m, n).sum(axis=0)
    f_var = np.diag(K) - np.sum((K @ Qsum) * K, axis=1)
    g_var = core.stack(mode.dual.h_diag(), m, n)
    return LatentSummary(
        f_mean, np.sqrt(np.maximum(f_var, 0.0)),
        core.stack(mode.x_star, m, n).T, np.sqrt(np.maximum(g_var, 0.0)).T,
    )


def f_band(summary, alpha=0.05):
    return confidence_band([summary.f_mean], [summary.f_sd], alpha)


__all__ = [
    "ConfidenceBand", "GaussianLikelihood", "LaplaceFit", "LaplaceGradient", "LaplaceValue",
    "LatentSummary", "ModeResult", "NONSTATIONARY_NAMES", "PoissonLikelihood", "PoissonModel",
    "STATIONARY_NAMES", "ZeroLikelihood", "f_band", "find_mode_newton", "find_mode_qn",
    "fit_laplace_map", "laplace", "laplace_grad", "laplace_value_and_grad", "latent_summary",
    "poisson_terms", "poisson_terms_flagged", "precondition_diag",
]
