import os
import subprocess
import sys

import numpy as np
import pytest

from rqk import _accel

needs_numba = pytest.mark.skipif(_accel.numba_impl is None, reason="numba unavailable")


@needs_numba
@pytest.mark.parametrize("m", [2, 3, 7])
def test_rotations_agree(m, rng):
    S = rng.standard_normal((m, 11))
    rot = (1 / np.sqrt(m), -(1 + 1 / np.sqrt(m)) / (m - 1))
    for name in ("rotate", "rotate_sq"):
        a = getattr(_accel.numpy_impl, name)(S, *rot)
        b = getattr(_accel.numba_impl, name)(S, *rot)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


@needs_numba
@pytest.mark.parametrize("name", ["matern52", "sqexp"])
def test_kernels_agree(name, rng):
    x = np.sort(rng.uniform(0, 1, 25))
    a = getattr(_accel.numpy_impl, name)(x, -1.2, 0.4)
    b = getattr(_accel.numba_impl, name)(x, -1.2, 0.4)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-13, atol=1e-15)


@needs_numba
def test_poisson_terms_agree(rng):
    x = rng.normal(0, 3, 40)
    x[0] = 45.0
    y = rng.poisson(2.0, 40).astype(float)
    a = _accel.numpy_impl.poisson(x, y, 0.3)
    b = _accel.numba_impl.poisson(x, y, 0.3)
    assert a[0] == pytest.approx(b[0], rel=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-13)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-13)
    assert a[3] is True and b[3]


def test_env_flag_selects_numpy():
    env = dict(os.environ, RQK_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from rqk import _accel; print(_accel.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_clamp_flag_and_value():
    ll, grad, mu, clamped = _accel.poisson(np.array([40.0, 0.0]), np.array([1.0, 0.0]), 1.0)
    assert clamped
    assert mu[0] == pytest.approx(np.exp(_accel.CLAMP))
