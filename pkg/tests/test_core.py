import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rqk import core
from rqk.core import (
    BlockRotation,
    QkMatrix,
    RqkMatrix,
    correlate,
    factor_mul,
    factor_solve,
    qk_factor,
    qk_logdet,
    qk_matvec,
    qk_solve,
    rotation_apply,
    rqk_eigen,
    rqk_factor,
    rqk_inverse,
    rqk_logdensity,
    rqk_logdet,
    rqk_matvec,
    rqk_mul,
    rqk_solve,
    to_dense,
    whiten,
)
from rqk.errors import (
    CapExceeded,
    DimensionMismatch,
    NotPositiveDefinite,
    SingularBlock,
    SingularMatrix,
)

from oracles import dense_qk, dense_rotation, dense_rqk, mvn_logpdf, random_spd, random_sym

METHODS = [core.CHOLESKY, core.EIGEN]


def random_rqk(rng, n, m):
    A = random_spd(rng, n)
    X = rng.standard_normal((n, max(1, n // 2)))
    return RqkMatrix(A, X @ X.T / n, m)


dims = st.tuples(st.integers(1, 8), st.integers(1, 6))


# ---------------------------------------------------------------------------
# rotation


@pytest.mark.parametrize("m", [1, 2, 3, 5, 9])
def test_rotation_is_symmetric_orthogonal(m):
    B = BlockRotation(m).dense()
    np.testing.assert_allclose(B.T @ B, np.eye(m), atol=1e-12)
    np.testing.assert_array_equal(B, B.T)
    e1 = np.zeros(m)
    e1[0] = np.sqrt(m)
    np.testing.assert_allclose(B @ np.ones(m), e1, atol=1e-12)
    np.testing.assert_allclose(B, dense_rotation(m), atol=1e-15)


def test_rotation_examples():
    np.testing.assert_array_equal(rotation_apply(BlockRotation(1), [[3.0], [4.0]]), [[3.0], [4.0]])
    np.testing.assert_allclose(rotation_apply(BlockRotation(2), [[1.0, 0.0]]), [[0.707107, 0.707107]], atol=1e-6)
    np.testing.assert_allclose(rotation_apply(BlockRotation(4), [[1.0, 1, 1, 1]]), [[2.0, 0, 0, 0]], atol=1e-14)
    rot = BlockRotation(2)
    assert rot.b == pytest.approx(-1.707107, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 10), m=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_rotation_matches_dense_and_is_self_inverse(n, m, seed):
    X = np.random.default_rng(seed).standard_normal((n, m))
    rot = BlockRotation(m)
    Y = rotation_apply(rot, X)
    np.testing.assert_allclose(Y, X @ dense_rotation(m), atol=1e-13)
    np.testing.assert_allclose(rotation_apply(rot, Y), X, atol=1e-10)


def test_rotation_dimension_check():
    with pytest.raises(DimensionMismatch):
        rotation_apply(BlockRotation(3), np.ones((2, 2)))


def test_squared_rotation():
    rot = BlockRotation(5)
    S = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(rot.stacked_sq(S), (rot.dense() ** 2) @ S, atol=1e-14)


# ---------------------------------------------------------------------------
# products, inverse, dense layout


def test_dense_layout_examples():
    np.testing.assert_array_equal(to_dense(RqkMatrix(np.eye(1), np.zeros((1, 1)), 2)), np.eye(2))
    np.testing.assert_array_equal(to_dense(RqkMatrix([[2.0]], [[1.0]], 2)), [[3, 1], [1, 3]])
    Q = QkMatrix([[[2.0]], [[3.0]]], [1, 1], [1, 1], [[1.0]])
    np.testing.assert_array_equal(to_dense(Q), [[3, 1], [1, 4]])


def test_dense_cap():
    S = RqkMatrix(np.eye(10), np.zeros((10, 10)), 5)
    with pytest.raises(CapExceeded):
        to_dense(S, cap=49)


def test_matvec_examples(rng):
    S = RqkMatrix(np.eye(3), np.zeros((3, 3)), 2)
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(rqk_matvec(S, x), x)
    np.testing.assert_allclose(rqk_matvec(RqkMatrix([[2.0]], [[1.0]], 2), np.array([1.0, 0.0])), [3, 1])
    with pytest.raises(DimensionMismatch):
        rqk_matvec(S, np.ones(5))


@settings(max_examples=60, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_matvec_matches_dense(d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = RqkMatrix(random_sym(rng, n), random_sym(rng, n), m)
    x = rng.standard_normal(n * m)
    want = dense_rqk(S.A, S.K, m) @ x
    np.testing.assert_allclose(rqk_matvec(S, x), want, rtol=1e-12, atol=1e-12 * np.abs(want).max())


def test_mul_examples():
    S = RqkMatrix([[1.0]], [[1.0]], 2)
    P = rqk_mul(S, RqkMatrix([[2.0]], [[3.0]], 2))
    assert P.A[0, 0] == 2 and P.K[0, 0] == 11
    I = RqkMatrix(np.eye(1), np.zeros((1, 1)), 2)
    R = rqk_mul(S, I)
    np.testing.assert_array_equal(R.A, S.A)
    np.testing.assert_array_equal(R.K, S.K)


@settings(max_examples=60, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_mul_matches_dense(d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S1 = RqkMatrix(random_sym(rng, n), random_sym(rng, n), m)
    S2 = RqkMatrix(random_sym(rng, n), random_sym(rng, n), m)
    want = to_dense(S1) @ to_dense(S2)
    got = rqk_mul(S1, S2)
    # products of symmetric matrices need not be symmetric: build the dense form directly
    D = np.kron(np.eye(m), got.A) + np.kron(np.ones((m, m)), got.K)
    np.testing.assert_allclose(D, want, rtol=1e-12, atol=1e-12 * np.abs(want).max())


def test_mul_dimension_check():
    with pytest.raises(DimensionMismatch):
        rqk_mul(RqkMatrix(np.eye(2), np.eye(2), 2), RqkMatrix(np.eye(2), np.eye(2), 3))


def test_inverse_examples():
    I = rqk_inverse(RqkMatrix(np.eye(2), np.zeros((2, 2)), 3))
    np.testing.assert_array_equal(I.A, np.eye(2))
    np.testing.assert_array_equal(I.K, np.zeros((2, 2)))
    inv = rqk_inverse(RqkMatrix([[2.0]], [[1.0]], 3))
    assert inv.A[0, 0] == pytest.approx(0.5)
    assert inv.K[0, 0] == pytest.approx(-0.1)
    with pytest.raises(SingularMatrix):
        rqk_inverse(RqkMatrix(np.zeros((2, 2)), np.eye(2), 2))


@settings(max_examples=60, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_inverse_matches_dense_and_composes_to_identity(d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = random_rqk(rng, n, m)
    inv = rqk_inverse(S)
    want = np.linalg.inv(to_dense(S))
    np.testing.assert_allclose(to_dense(inv), want, rtol=1e-8, atol=1e-8 * np.abs(want).max())
    P = rqk_mul(inv, S)
    np.testing.assert_allclose(P.A, np.eye(n), atol=1e-8)
    assert np.max(np.abs(P.K)) < 1e-8


# ---------------------------------------------------------------------------
# factors


@pytest.mark.parametrize("method", METHODS)
def test_factor_examples(method):
    F = rqk_factor(RqkMatrix(np.eye(3), np.zeros((3, 3)), 4), method)
    assert rqk_logdet(F) == pytest.approx(0.0, abs=1e-14)
    if method == core.CHOLESKY:
        np.testing.assert_array_equal(F.U, np.eye(3))
        np.testing.assert_array_equal(F.V, np.eye(3))
    F = rqk_factor(RqkMatrix([[2.0]], [[1.0]], 3), method)
    assert abs(F.U[0, 0]) == pytest.approx(np.sqrt(5))
    assert abs(F.V[0, 0]) == pytest.approx(np.sqrt(2))
    assert rqk_logdet(F) == pytest.approx(np.log(20), abs=1e-12)
    assert rqk_logdet(F) == pytest.approx(2.995732, abs=1e-6)


@pytest.mark.parametrize("method", METHODS)
@settings(max_examples=40, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_factor_reproduces_matrix(method, d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = random_rqk(rng, n, m)
    F = rqk_factor(S, method)
    np.testing.assert_allclose(F.U.T @ F.U, S.A + m * S.K, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(F.V.T @ F.V, S.A, rtol=1e-10, atol=1e-12)
    G = to_dense(F)
    D = to_dense(S)
    np.testing.assert_allclose(G.T @ G, D, rtol=1e-10, atol=1e-10 * np.abs(D).max())
    assert F.logdet_ApmK == pytest.approx(np.linalg.slogdet(S.A + m * S.K)[1], rel=1e-10, abs=1e-12)
    assert F.logdet_A == pytest.approx(np.linalg.slogdet(S.A)[1], rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("m", [1, 2, 10, 50])
def test_exactly_two_factorizations(m, rng):
    S = random_rqk(rng, 6, m)
    before = core.factorization_count
    rqk_factor(S)
    assert core.factorization_count - before == 2
    before = core.factorization_count
    rqk_eigen(S)
    assert core.factorization_count - before == 2


def test_factor_reports_which_matrix_failed(rng):
    A = random_spd(rng, 3)
    with pytest.raises(NotPositiveDefinite) as exc:
        rqk_factor(RqkMatrix(A, -10 * np.eye(3), 2))
    assert exc.value.which == "A+mK"
    with pytest.raises(NotPositiveDefinite) as exc:
        rqk_factor(RqkMatrix(-A, 10 * np.eye(3), 2), core.EIGEN)
    assert exc.value.which == "A"


@pytest.mark.parametrize("method", METHODS)
@settings(max_examples=40, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_transforms_match_dense(method, d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = random_rqk(rng, n, m)
    F = rqk_factor(S, method)
    G = to_dense(F)
    z = rng.standard_normal(n * m)
    for got, want in [
        (correlate(F, z), G.T @ z),
        (whiten(F, z), np.linalg.solve(G.T, z)),
        (factor_mul(F, z), G @ z),
        (factor_solve(F, z), np.linalg.solve(G, z)),
        (rqk_solve(F, z), np.linalg.solve(to_dense(S), z)),
    ]:
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10 * max(1, np.abs(want).max()))
    np.testing.assert_allclose(whiten(F, correlate(F, z)), z, atol=1e-9)
    np.testing.assert_allclose(correlate(F, whiten(F, z)), z, atol=1e-9)
    w = whiten(F, z)
    assert w @ w == pytest.approx(z @ np.linalg.solve(to_dense(S), z), rel=1e-8)


def test_identity_transforms():
    F = rqk_factor(RqkMatrix(np.eye(4), np.zeros((4, 4)), 1))
    z = np.arange(4.0)
    np.testing.assert_array_equal(correlate(F, z), z)
    np.testing.assert_array_equal(whiten(F, z), z)
    with pytest.raises(DimensionMismatch):
        whiten(F, np.ones(3))


def test_round_trip_at_dense_cap(rng):
    S = random_rqk(rng, 64, 64)
    F = rqk_factor(S)
    z = rng.standard_normal(64 * 64)
    np.testing.assert_allclose(whiten(F, correlate(F, z)), z, atol=1e-9)


def test_correlated_draws_have_the_right_covariance():
    rng = np.random.default_rng(3)
    n, m, N = 3, 2, 100_000
    S = random_rqk(rng, n, m)
    F = rqk_factor(S)
    Z = rng.standard_normal((n * m, N))
    X = np.stack([correlate(F, Z[:, k]) for k in range(2000)], axis=1)
    # the vectorized path is checked against the loop on a prefix, then used for all draws
    G = to_dense(F)
    np.testing.assert_allclose(X, G.T @ Z[:, :2000], atol=1e-12)
    X = G.T @ Z
    C = X @ X.T / N
    D = to_dense(S)
    scale = np.sqrt(np.outer(np.diag(D), np.diag(D)))
    assert np.max(np.abs(C - D) / scale) < 5 * (n * m) / np.sqrt(N)


# ---------------------------------------------------------------------------
# densities and spectra


def test_logdensity_examples():
    F = rqk_factor(RqkMatrix(np.eye(3), np.zeros((3, 3)), 2))
    assert rqk_logdensity(F, np.zeros(6)) == pytest.approx(-3 * np.log(2 * np.pi), abs=1e-14)
    assert rqk_logdensity(F, np.zeros(6)) == pytest.approx(-5.513631, abs=1e-6)


@pytest.mark.parametrize("method", METHODS)
@settings(max_examples=40, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_logdensity_matches_dense(method, d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = random_rqk(rng, n, m)
    F = rqk_factor(S, method)
    x = rng.standard_normal(n * m)
    assert rqk_logdensity(F, x) == pytest.approx(mvn_logpdf(x, to_dense(S)), abs=1e-8)
    vals = [rqk_logdensity(F, c * x) for c in (0, 1, 2, 3)]
    assert vals[0] == max(vals)
    assert rqk_logdet(F) == pytest.approx(np.linalg.slogdet(to_dense(S))[1], rel=1e-9, abs=1e-12)


def test_eigen_examples():
    E = rqk_eigen(RqkMatrix(np.eye(2), np.zeros((2, 2)), 5))
    np.testing.assert_allclose(E.spectrum(), np.ones(10))
    E = rqk_eigen(RqkMatrix([[2.0]], [[1.0]], 3))
    np.testing.assert_allclose(E.spectrum(), [2, 2, 5])


@settings(max_examples=60, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_eigen_matches_dense_spectrum(d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    S = RqkMatrix(random_sym(rng, n), random_sym(rng, n), m)
    want = np.linalg.eigvalsh(to_dense(S))
    np.testing.assert_allclose(rqk_eigen(S).spectrum(), want, rtol=1e-8, atol=1e-10 * np.abs(want).max())


@settings(max_examples=100, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16))
def test_block_rotation_diagonalizes(d, seed):
    rng = np.random.default_rng(seed)
    n, m = d
    A, K = random_sym(rng, n), random_sym(rng, n)
    R = np.kron(dense_rotation(m), np.eye(n))
    D = R @ dense_rqk(A, K, m) @ R.T
    want = np.kron(np.eye(m), A)
    want[:n, :n] += m * K
    assert np.max(np.abs(D - want)) < 1e-10


# ---------------------------------------------------------------------------
# QK matrices


def small_qk():
    return QkMatrix([[[2.0]], [[3.0]]], [1, 1], [1, 1], [[1.0]])


def test_qk_examples():
    x = np.array([1.0, 0.0])
    I = QkMatrix(np.stack([np.eye(2)] * 3), np.ones(3), np.ones(3), np.zeros((2, 2)))
    np.testing.assert_array_equal(qk_matvec(I, np.arange(6.0)), np.arange(6.0))
    np.testing.assert_allclose(qk_matvec(small_qk(), x), [3, 1])
    np.testing.assert_allclose(qk_solve(small_qk(), x), [4 / 11, -1 / 11], atol=1e-15)
    s, ld = qk_logdet(small_qk())
    assert s == 1 and ld == pytest.approx(np.log(11))
    s, ld = qk_logdet(I)
    assert s == 1 and ld == pytest.approx(0.0, abs=1e-15)
    b = np.arange(6.0)
    Q0 = QkMatrix(np.stack([np.diag([1.0, 2]), np.diag([3.0, 4]), np.eye(2)]), np.ones(3), np.ones(3), np.zeros((2, 2)))
    np.testing.assert_allclose(qk_solve(Q0, b), b / np.array([1, 2, 3, 4, 1, 1]))


def random_qk(rng, n, m, K_kind):
    blocks = np.stack([random_spd(rng, n) for _ in range(m)])
    if K_kind == "psd":
        X = rng.standard_normal((n, n))
        K = X @ X.T / n
    elif K_kind == "neg":
        X = rng.standard_normal((n, n))
        K = -0.2 * X @ X.T / n
    else:
        K = 0.3 * random_sym(rng, n)
    u = rng.uniform(0.5, 1.5, m) * rng.choice([-1, 1], m)
    v = rng.uniform(0.5, 1.5, m)
    return QkMatrix(blocks, u, v, K)


@settings(max_examples=100, deadline=None)
@given(d=dims, seed=st.integers(0, 2**16), kind=st.sampled_from(["psd", "neg", "indef"]))
def test_qk_matches_dense(d, seed, kind):
    rng = np.random.default_rng(seed)
    n, m = d
    Q = random_qk(rng, n, m, kind)
    D = dense_qk(Q.blocks, Q.u, Q.v, Q.K)
    x = rng.standard_normal(n * m)
    want = D @ x
    np.testing.assert_allclose(qk_matvec(Q, x), want, rtol=1e-12, atol=1e-12 * np.abs(want).max())
    sign, ld = np.linalg.slogdet(D)
    if abs(ld) > 50 or np.linalg.cond(D) > 1e8:
        return
    sol = qk_solve(Q, x)
    np.testing.assert_allclose(sol, np.linalg.solve(D, x), rtol=1e-8, atol=1e-8 * np.abs(sol).max())
    assert np.linalg.norm(D @ sol - x) <= 1e-8 * np.linalg.norm(x)
    s, l = qk_logdet(Q)
    assert s == sign
    assert l == pytest.approx(ld, rel=1e-9, abs=1e-10)


def test_qk_factor_block_queries(rng):
    n, m = 4, 3
    Q = random_qk(rng, n, m, "neg")
    D = np.linalg.inv(dense_qk(Q.blocks, Q.u, Q.v, Q.K))
    F = qk_factor(Q)
    blocks = [[D[i * n:(i + 1) * n, j * n:(j + 1) * n] for j in range(m)] for i in range(m)]
    np.testing.assert_allclose(F.diag_blocks(), np.stack([blocks[i][i] for i in range(m)]), atol=1e-12)
    wr = rng.standard_normal(m)
    wl = rng.standard_normal(m)
    rows = np.stack([sum(wr[j] * blocks[i][j] for j in range(m)) for i in range(m)])
    np.testing.assert_allclose(F.block_row_sums(wr), rows, atol=1e-12)
    total = sum(wl[i] * wr[j] * blocks[i][j] for i in range(m) for j in range(m))
    np.testing.assert_allclose(F.block_sum(wl, wr), total, atol=1e-12)
    B = rng.standard_normal((n * m, 3))
    np.testing.assert_allclose(F.solve(B), D @ B, atol=1e-12)


def test_qk_singular_block():
    Q = QkMatrix(np.stack([np.eye(2), np.zeros((2, 2))]), np.ones(2), np.ones(2), np.eye(2))
    with pytest.raises(SingularBlock) as exc:
        qk_solve(Q, np.ones(4))
    assert exc.value.index == 1


def test_qk_from_rqk(rng):
    S = random_rqk(rng, 3, 4)
    d = rng.uniform(0, 1, 12)
    Q = QkMatrix.from_rqk(S, d)
    np.testing.assert_allclose(to_dense(Q), to_dense(S) + np.diag(d))


def test_qk_validation():
    with pytest.raises(DimensionMismatch):
        QkMatrix(np.ones((2, 2, 3)), [1, 1], [1, 1], np.eye(2))
    with pytest.raises(DimensionMismatch):
        QkMatrix(np.ones((2, 2, 2)), [1], [1, 1], np.eye(2))
    with pytest.raises(DimensionMismatch):
        RqkMatrix(np.eye(2), np.eye(3), 2)
    with pytest.raises(ValueError):
        RqkMatrix(np.eye(2), np.eye(2), 0)
