"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with an identical signature. The
compiled versions are used unless ``RQK_DISABLE_NUMBA`` is set to a
truthy value or numba cannot be imported; ``BACKEND`` records the choice.
Both sets stay importable (``numpy_impl`` / ``numba_impl``) so the
benchmark and the tests can compare them directly.
"""

import os
import types

import numpy as np

SQRT5 = np.sqrt(5.0)
CLAMP = 30.0


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


# ---------------------------------------------------------------------------
# pure numpy


# Rotations act on the stacked layout S (m, n): row i holds function i,
# which is vec(X) reshaped without copying. They return B @ S.


def _rotate_np(S, a, b):
    tail = S[1:].sum(axis=0)
    out = np.empty_like(S)
    out[0] = a * (S[0] + tail)
    out[1:] = (a * S[0] + b * tail) + S[1:]
    return out


def _rotate_sq_np(S, a, b):
    a2, b2, c2 = a * a, b * b, (b + 1.0) ** 2 - b * b
    tail = S[1:].sum(axis=0)
    out = np.empty_like(S)
    out[0] = a2 * (S[0] + tail)
    out[1:] = (a2 * S[0] + b2 * tail) + c2 * S[1:]
    return out


def _matern52_np(x, theta1, theta2):
    d = np.abs(x[:, None] - x[None, :])
    u = SQRT5 * d * np.exp(-theta1)
    e = np.exp(-u + theta2)
    K = (1.0 + u + u * u / 3.0) * e
    dK1 = e * u * u * (1.0 + u) / 3.0
    return K, dK1


def _sqexp_np(x, theta1, theta2):
    d2 = (x[:, None] - x[None, :]) ** 2
    q = np.exp(-theta1) * d2 / 2.0
    K = np.exp(-q + theta2)
    return K, K * q


def _poisson_np(x, y, rate_scale):
    xc = np.minimum(x, CLAMP)
    mu = rate_scale * np.exp(xc)
    ll = float(np.sum(y * xc - mu))
    return ll, y - mu, mu, bool(np.any(x > CLAMP))


numpy_impl = types.SimpleNamespace(
    rotate=_rotate_np,
    rotate_sq=_rotate_sq_np,
    matern52=_matern52_np,
    sqexp=_sqexp_np,
    poisson=_poisson_np,
)


# ---------------------------------------------------------------------------
# numba


def _build_numba():
    from numba import njit

    opts = dict(cache=True, nogil=True)

    @njit(**opts)
    def _rotate_generic(S, w0, wb, wd):
        # out[0] = w0 * sum_k S[k]; out[k] = w0 * S[0] + wb * sum_{l>0} S[l] + wd * S[k]
        m, n = S.shape
        tail = np.zeros(n)
        for k in range(1, m):
            for j in range(n):
                tail[j] += S[k, j]
        out = np.empty_like(S)
        for j in range(n):
            out[0, j] = w0 * (S[0, j] + tail[j])
        for k in range(1, m):
            for j in range(n):
                out[k, j] = w0 * S[0, j] + wb * tail[j] + wd * S[k, j]
        return out

    @njit(**opts)
    def rotate(S, a, b):
        return _rotate_generic(S, a, b, 1.0)

    @njit(**opts)
    def rotate_sq(S, a, b):
        return _rotate_generic(S, a * a, b * b, (b + 1.0) ** 2 - b * b)

    @njit(**opts)
    def matern52(x, theta1, theta2):
        n = x.shape[0]
        K = np.empty((n, n))
        dK1 = np.empty((n, n))
        scale = SQRT5 * np.exp(-theta1)
        for i in range(n):
            for j in range(i, n):
                u = scale * abs(x[i] - x[j])
                e = np.exp(-u + theta2)
                k = (1.0 + u + u * u / 3.0) * e
                g = e * u * u * (1.0 + u) / 3.0
                K[i, j] = k
                K[j, i] = k
                dK1[i, j] = g
                dK1[j, i] = g
        return K, dK1

    @njit(**opts)
    def sqexp(x, theta1, theta2):
        n = x.shape[0]
        K = np.empty((n, n))
        dK1 = np.empty((n, n))
        s = np.exp(-theta1) / 2.0
        for i in range(n):
            for j in range(i, n):
                d = x[i] - x[j]
                q = s * d * d
                k = np.exp(-q + theta2)
                K[i, j] = k
                K[j, i] = k
                dK1[i, j] = k * q
                dK1[j, i] = k * q
        return K, dK1

    @njit(**opts)
    def poisson(x, y, rate_scale):
        N = x.shape[0]
        grad = np.empty(N)
        mu = np.empty(N)
        ll = 0.0
        clamped = False
        for i in range(N):
            xi = x[i]
            if xi > CLAMP:
                xi = CLAMP
                clamped = True
            mi = rate_scale * np.exp(xi)
            ll += y[i] * xi - mi
            grad[i] = y[i] - mi
            mu[i] = mi
        return ll, grad, mu, clamped

    return types.SimpleNamespace(
        rotate=rotate,
        rotate_sq=rotate_sq,
        matern52=matern52,
        sqexp=sqexp,
        poisson=poisson,
    )


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

if numba_impl is None or _flag("RQK_DISABLE_NUMBA"):
    BACKEND = "numpy"
    impl = numpy_impl
else:
    BACKEND = "numba"
    impl = numba_impl


def rotate(S, a, b):
    return impl.rotate(np.ascontiguousarray(S, dtype=float), float(a), float(b))


def rotate_sq(S, a, b):
    return impl.rotate_sq(np.ascontiguousarray(S, dtype=float), float(a), float(b))


def matern52(x, theta1, theta2):
    return impl.matern52(np.ascontiguousarray(x, dtype=float), float(theta1), float(theta2))


def sqexp(x, theta1, theta2):
    return impl.sqexp(np.ascontiguousarray(x, dtype=float), float(theta1), float(theta2))


def poisson(x, y, rate_scale):
    ll, grad, mu, clamped = impl.poisson(
        np.ascontiguousarray(x, dtype=float),
        np.ascontiguousarray(y, dtype=float),
        float(rate_scale),
    )
    return float(ll), grad, mu, bool(clamped)
