"""Limited-memory BFGS with a strong-Wolfe line search.

Everything here minimizes. Model code that maximizes a log-density wraps
it as ``x -> (-f(x), -grad f(x))``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import LineSearchFailed, NonFiniteObjective


@dataclass
class Objective:
    """``eval(x) -> (value, gradient)`` plus an optional diagonal preconditioner.

    The preconditioner approximates the diagonal of the Hessian; it becomes
    the initial inverse-Hessian scaling ``diag(1 / precondition)``.
    """

    eval: Callable
    dim: int
    precondition: Optional[np.ndarray] = None


@dataclass
class OptimResult:
    x_opt: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    n_evals: int = 0
    message: str = ""
    grad: Optional[np.ndarray] = None


def _as_objective(obj, dim=None):
    if isinstance(obj, Objective):
        return obj
    return Objective(obj, dim)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic matching values and slopes at a and b, or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.copysign(np.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0 or not np.isfinite(denom) or not np.isfinite(d1):
        return None
    t = b - (b - a) * (db + d2 - d1) / denom
    return t if np.isfinite(t) else None


def line_search(phi, f0, d0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=40, alpha_max=1e10):
    """Find a step satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(value, slope, payload)``. Non-finite values are
    treated as overshooting. Returns ``(alpha, value, slope, payload, n_evals)``.
    """
    if not d0 < 0:
        raise LineSearchFailed("search direction is not a descent direction")
    evals = 0

    def zoom(lo, flo, dlo, hi, fhi, dhi):
        nonlocal evals
        while evals < max_evals:
            t = None
            if np.isfinite(fhi) and np.isfinite(dhi):
                t = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            margin = 0.1 * (hi_b - lo_b)
            if t is None or not (lo_b + margin <= t <= hi_b - margin):
                t = 0.5 * (lo + hi)
            ft, dt, pt = phi(t)
            evals += 1
            if not np.isfinite(ft) or ft > f0 + c1 * t * d0 or ft >= flo:
                hi, fhi, dhi = t, ft, dt
            else:
                if abs(dt) <= -c2 * d0:
                    return t, ft, dt, pt
                if dt * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = t, ft, dt
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchFailed("zoom did not find a strong-Wolfe step")

    prev, fprev, dprev = 0.0, f0, d0
    alpha = alpha0
    first = True
    while evals < max_evals:
        fa, da, pa = phi(alpha)
        evals += 1
        if not np.isfinite(fa) or fa > f0 + c1 * alpha * d0 or (not first and fa >= fprev):
            res = zoom(prev, fprev, dprev, alpha, fa, da)
            return res + (evals,)
        if abs(da) <= -c2 * d0:
            return alpha, fa, da, pa, evals
        if da >= 0:
            res = zoom(alpha, fa, da, prev, fprev, dprev)
            return res + (evals,)
        prev, fprev, dprev = alpha, fa, da
        alpha = min(4.0 * alpha, alpha_max)
        first = False
    raise LineSearchFailed("bracketing phase exhausted its evaluations")


def lbfgs(obj, x0, memory=10, tol=1e-6, max_iter=500, ftol=1e-10, c1=1e-4, c2=0.9, callback=None):
    """Minimize ``obj`` from ``x0``.

    Stops when the gradient inf-norm drops below ``tol`` or the relative
    change in value falls below ``ftol`` (set ``ftol=0`` to rely on the
    gradient alone). ``converged`` is true only in the first case or when
    the gradient is also below ``tol`` at an ``ftol`` stop.
    """
    obj = _as_objective(obj, np.size(x0))
    x = np.array(x0, dtype=float).reshape(-1)
    f, g = obj.eval(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective(f"objective is not finite at the starting point (value {f})")
    dinv = None
    if obj.precondition is not None:
        dinv = 1.0 / np.asarray(obj.precondition, dtype=float)
    S, Y, rho = [], [], []
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    trace = [(f, gnorm)]
    if gnorm < tol:
        return OptimResult(x, f, gnorm, 0, True, trace, n_evals, "gradient below tolerance", g)

    def direction(g):
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * (s @ q)
            q -= a * y
            alphas.append(a)
        if S:
            y = Y[-1]
            if dinv is None:
                gamma = (S[-1] @ y) / (y @ y)
                r_ = gamma * q
            else:
                gamma = (S[-1] @ y) / (y @ (dinv * y))
                r_ = gamma * dinv * q
        else:
            r_ = q if dinv is None else dinv * q
        for s, y, r, a in zip(S, Y, rho, reversed(alphas)):
            b = r * (y @ r_)
            r_ += s * (a - b)
        return -r_

    message = "maximum iterations reached"
    converged = False
    it = 0
    while it < max_iter:
        d = direction(g)
        slope = float(g @ d)
        if not slope < 0:
            S.clear(), Y.clear(), rho.clear()
            d = -g if dinv is None else -dinv * g
            slope = float(g @ d)
        if S or dinv is not None:
            alpha0 = 1.0
        else:
            alpha0 = min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))

        def phi(alpha, x=x, d=d):
            xa = x + alpha * d
            fa, ga = obj.eval(xa)
            fa = float(fa)
            ga = np.asarray(ga, dtype=float)
            if not np.all(np.isfinite(ga)):
                fa = np.inf
            return fa, (float(ga @ d) if np.isfinite(fa) else np.nan), (xa, ga)

        try:
            alpha, f_new, _, (x_new, g_new), ne = line_search(phi, f, slope, alpha0, c1, c2)
        except LineSearchFailed as exc:
            if S:
                S.clear(), Y.clear(), rho.clear()
                continue
            message = f"line search failed: {exc}"
            break
        n_evals += ne
        it += 1
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        f_old = f
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.max(np.abs(g)))
        trace.append((f, gnorm))
        if callback is not None:
            callback(x, f, g)
        if gnorm < tol:
            converged = True
            message = "gradient below tolerance"
            break
        if abs(f_old - f) <= ftol * max(1.0, abs(f_old), abs(f)):
            converged = gnorm < tol
            message = "relative change in value below ftol"
            break
    return OptimResult(x, f, gnorm, it, converged, trace, n_evals, message, g)


def fd_grad_check(obj, x, h=1e-5):
    """Largest relative error between the analytic and central-difference gradient.

    Relative errors use ``max(1, |analytic|)`` as denominator.
    """
    ev = obj.eval if isinstance(obj, Objective) else obj
    x = np.array(x, dtype=float).reshape(-1)
    _, g = ev(x)
    g = np.asarray(g, dtype=float)
    err = 0.0
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (float(ev(xp)[0]) - float(ev(xm)[0])) / (2.0 * h)
        err = max(err, abs(fd - g[j]) / max(1.0, abs(g[j])))
    return err
