"""Restricted quasi-Kronecker (rQK) and quasi-Kronecker (QK) matrices.

An rQK matrix ``I_m (x) A + ee^t (x) K`` is stored through its two n x n
blocks. Rotating by ``R = B (x) I_n`` makes it block diagonal with blocks
``A + mK, A, ..., A``, so factorizing it costs two n x n factorizations
whatever ``m`` is, and every transform after that is ``O(mn^2)``.

Vectors of length ``mn`` are ``vec(X)`` for an ``n x m`` matrix ``X``
whose column ``i`` holds function ``i``. Internally they are viewed as the
stacked ``(m, n)`` array whose row ``i`` is that column; this is a reshape,
not a copy.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _accel
from .errors import (
    CapExceeded,
    DimensionMismatch,
    NotPositiveDefinite,
    SingularBlock,
    SingularCapacitance,
    SingularFactor,
    SingularMatrix,
)

DENSE_CAP = 4096

CHOLESKY = "cholesky"
EIGEN = "eigen"

# Number of n x n factorizations performed by rqk_factor / rqk_eigen.
# Instrumentation only; tests read the difference across a call.
factorization_count = 0


def _count(k=1):
    global factorization_count
    factorization_count += k


def _as_sym(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {M.shape}")
    return M


def stack(x, m, n):
    """View a length-mn vector as the (m, n) stack of its blocks."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != m * n:
        raise DimensionMismatch(f"expected a vector of length {m * n}, got {x.shape[0]}")
    return x.reshape((m, n) + x.shape[1:])


@dataclass(frozen=True)
class RqkMatrix:
    """``I_m (x) A + ee^t (x) K``."""

    A: np.ndarray
    K: np.ndarray
    m: int

    def __post_init__(self):
        A = _as_sym(self.A, "A")
        K = _as_sym(self.K, "K")
        if A.shape != K.shape:
            raise DimensionMismatch(f"A is {A.shape} but K is {K.shape}")
        if int(self.m) < 1:
            raise ValueError("m must be at least 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "m", int(self.m))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def size(self):
        return self.m * self.n

    def __matmul__(self, other):
        if isinstance(other, RqkMatrix):
            return rqk_mul(self, other)
        return rqk_matvec(self, other)


@dataclass(frozen=True)
class QkMatrix:
    """``bdiag(A_1, ..., A_m) + uv^t (x) K``."""

    blocks: np.ndarray
    u: np.ndarray
    v: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise DimensionMismatch(f"blocks must have shape (m, n, n), got {blocks.shape}")
        m, n = blocks.shape[:2]
        u = np.asarray(self.u, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float).reshape(-1)
        K = _as_sym(self.K, "K")
        if u.size != m or v.size != m:
            raise DimensionMismatch("u and v need one entry per block")
        if K.shape != (n, n):
            raise DimensionMismatch(f"K must be {n}x{n}")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "K", K)

    @property
    def m(self):
        return self.blocks.shape[0]

    @property
    def n(self):
        return self.blocks.shape[1]

    @classmethod
    def from_rqk(cls, S, diag=None):
        """``S + diag(d)`` as a QK matrix (``diag`` has length mn)."""
        blocks = np.broadcast_to(S.A, (S.m, S.n, S.n)).copy()
        if diag is not None:
            d = stack(diag, S.m, S.n)
            idx = np.arange(S.n)
            blocks[:, idx, idx] += d
        e = np.ones(S.m)
        return cls(blocks, e, e, S.K)


# ---------------------------------------------------------------------------
# block rotation


@dataclass(frozen=True)
class BlockRotation:
    """The symmetric orthogonal m x m matrix with first row ``e^t / sqrt(m)``.

    ``B = [[a, a 1^t], [a 1, b 11^t + I]]`` with ``a = 1/sqrt(m)`` and
    ``b = -(1 + 1/sqrt(m)) / (m - 1)``, so products with it cost ``O(m)``.
    For ``m = 1``, ``B = [1]`` and ``b`` is unused (stored as NaN).
    """

    m: int
    a: float = field(init=False)
    b: float = field(init=False)

    def __post_init__(self):
        m = int(self.m)
        if m < 1:
            raise ValueError("m must be at least 1")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "a", 1.0 / np.sqrt(m))
        b = -(1.0 + 1.0 / np.sqrt(m)) / (m - 1) if m > 1 else np.nan
        object.__setattr__(self, "b", b)

    def dense(self):
        if self.m == 1:
            return np.ones((1, 1))
        B = np.full((self.m, self.m), self.b)
        B[0, :] = self.a
        B[:, 0] = self.a
        B[1:, 1:] += np.eye(self.m - 1)
        return B

    def stacked(self, S):
        """``B @ S`` for a stacked (m, ...) array."""
        if self.m == 1:
            return np.array(S, dtype=float, copy=True)
        shape = S.shape
        out = _accel.rotate(S.reshape(self.m, -1), self.a, self.b)
        return out.reshape(shape)

    def stacked_sq(self, S):
        """``(B * B) @ S``, the elementwise-squared rotation."""
        if self.m == 1:
            return np.array(S, dtype=float, copy=True)
        shape = S.shape
        out = _accel.rotate_sq(S.reshape(self.m, -1), self.a, self.b)
        return out.reshape(shape)


def rotation_apply(rot, X):
    """``X @ B`` for an n x m matrix ``X`` in ``O(nm)``.

    B is symmetric and orthogonal, so applying it twice is the identity.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != rot.m:
        raise DimensionMismatch(f"X must have {rot.m} columns, got shape {X.shape}")
    return rot.stacked(X.T).T


# ---------------------------------------------------------------------------
# rQK algebra


def rqk_matvec(S, x):
    X = stack(x, S.m, S.n)
    total = X.sum(axis=0)
    out = X @ S.A.T + (total @ S.K.T)
    return out.reshape(x.shape)


def rqk_mul(S1, S2):
    if S1.n != S2.n or S1.m != S2.m:
        raise DimensionMismatch("rQK operands need equal n and m")
    A = S1.A @ S2.A
    K = S1.A @ S2.K + S1.K @ S2.A + S1.m * (S1.K @ S2.K)
    return RqkMatrix(A, K, S1.m)


def _inv(M, which):
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise SingularMatrix(f"{which} is singular") from None
    if not np.all(np.isfinite(Minv)):
        raise SingularMatrix(f"{which} is singular")
    return Minv


def rqk_inverse(S):
    Ainv = _inv(S.A, "A")
    Binv = _inv(S.A + S.m * S.K, "A+mK")
    return RqkMatrix(Ainv, (Binv - Ainv) / S.m, S.m)


def to_dense(S, cap=DENSE_CAP):
    """Explicit matrix for an rQK or QK matrix; the square root G for a factor."""
    if isinstance(S, RqkFactor):
        return _factor_dense(S, cap)
    mn = S.m * S.n
    if mn > cap:
        raise CapExceeded(f"dense materialization of {mn} rows exceeds cap {cap}")
    if isinstance(S, RqkMatrix):
        D = np.tile(S.K, (S.m, S.m))
        for i in range(S.m):
            D[i * S.n:(i + 1) * S.n, i * S.n:(i + 1) * S.n] += S.A
        return D
    if isinstance(S, QkMatrix):
        return scipy.linalg.block_diag(*S.blocks) + np.kron(np.outer(S.u, S.v), S.K)
    raise TypeError(f"cannot materialize {type(S).__name__}")


# ---------------------------------------------------------------------------
# square roots


class _Root:
    """R with R^t R = M, from a Cholesky (upper) or eigen factorization.

    All methods act on column matrices (n, k).
    """

    def __init__(self, M, method, which):
        _count()
        self.method = method
        if method == CHOLESKY:
            try:
                self.R = scipy.linalg.cholesky(M, lower=False)
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite(which) from None
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.R))))
        elif method == EIGEN:
            lam, Q = np.linalg.eigh(M)
            if not lam[0] > 0:
                raise NotPositiveDefinite(which, f"{which} has eigenvalue {lam[0]:.3g}")
            self.Q, self.s = Q, np.sqrt(lam)
            self.R = self.s[:, None] * Q.T
            self.logdet = float(np.sum(np.log(lam)))
        else:
            raise ValueError(f"unknown factorization method {method!r}")

    def t_mul(self, Y):
        if self.method == CHOLESKY:
            return self.R.T @ Y
        return self.Q @ (self.s[:, None] * Y)

    def t_solve(self, Y):
        if self.method == CHOLESKY:
            return scipy.linalg.solve_triangular(self.R, Y, trans="T", lower=False)
        return (self.Q.T @ Y) / self.s[:, None]

    def mul(self, Y):
        if self.method == CHOLESKY:
            return self.R @ Y
        return self.s[:, None] * (self.Q.T @ Y)

    def solve(self, Y):
        if self.method == CHOLESKY:
            return scipy.linalg.solve_triangular(self.R, Y, lower=False)
        return self.Q @ (Y / self.s[:, None])


@dataclass(frozen=True, eq=False)
class RqkFactor:
    """Square root ``G = bdiag(U, V, ..., V) R`` with ``G^t G = S``.

    ``U^t U = A + mK`` and ``V^t V = A``.
    """

    head: _Root
    tail: _Root
    rotation: BlockRotation
    n: int

    @property
    def m(self):
        return self.rotation.m

    @property
    def method(self):
        return self.head.method

    @property
    def U(self):
        return self.head.R

    @property
    def V(self):
        return self.tail.R

    @property
    def logdet_ApmK(self):
        return self.head.logdet

    @property
    def logdet_A(self):
        return self.tail.logdet


def rqk_factor(S, method=CHOLESKY):
    """Factor ``A + mK`` and ``A``; nothing else is ever factorized."""
    head = _Root(S.A + S.m * S.K, method, "A+mK")
    tail = _Root(S.A, method, "A")
    return RqkFactor(head, tail, BlockRotation(S.m), S.n)


def _blockwise(F, Z, op):
    # Apply op(root, columns) with U on block 0 and V on blocks 1..m-1.
    out = np.empty_like(Z)
    out[0] = getattr(F.head, op)(Z[0][:, None])[:, 0]
    if F.m > 1:
        out[1:] = getattr(F.tail, op)(Z[1:].T).T
    return out


def correlate(F, z):
    """``G^t z``: turns white noise into a draw with covariance S."""
    Z = stack(z, F.m, F.n)
    return F.rotation.stacked(_blockwise(F, Z, "t_mul")).reshape(-1)


def whiten(F, x):
    """``G^{-t} x``: the inverse of :func:`correlate`."""
    X = stack(x, F.m, F.n)
    return _blockwise(F, F.rotation.stacked(X), "t_solve").reshape(-1)


def factor_mul(F, y):
    """``G y`` (adjoint of :func:`correlate`)."""
    Y = stack(y, F.m, F.n)
    return _blockwise(F, F.rotation.stacked(Y), "mul").reshape(-1)


def factor_solve(F, z):
    """``G^{-1} z`` (adjoint of :func:`whiten`)."""
    Z = stack(z, F.m, F.n)
    return F.rotation.stacked(_blockwise(F, Z, "solve")).reshape(-1)


def rqk_solve(F, x):
    """``S^{-1} x = G^{-1} G^{-t} x``."""
    return factor_solve(F, whiten(F, x))


def rqk_logdet(F):
    return F.logdet_ApmK + (F.m - 1) * F.logdet_A


def rqk_logdensity(F, x):
    """Log-density of ``N(0, S)`` at ``x``, including the 2*pi constant."""
    z = whiten(F, x)
    mn = F.m * F.n
    return -0.5 * mn * np.log(2.0 * np.pi) - 0.5 * rqk_logdet(F) - 0.5 * float(z @ z)


def _factor_dense(F, cap):
    mn = F.m * F.n
    if mn > cap:
        raise CapExceeded(f"dense materialization of {mn} rows exceeds cap {cap}")
    D = scipy.linalg.block_diag(F.U, *([F.V] * (F.m - 1)))
    return D @ np.kron(F.rotation.dense(), np.eye(F.n))


# ---------------------------------------------------------------------------
# spectrum


@dataclass(frozen=True)
class EigenRqk:
    eigvals_head: np.ndarray
    eigvals_tail: np.ndarray
    eigvecs_head: np.ndarray
    eigvecs_tail: np.ndarray
    rotation: BlockRotation

    def spectrum(self):
        """All mn eigenvalues, sorted ascending."""
        m = self.rotation.m
        return np.sort(np.concatenate([self.eigvals_head] + [self.eigvals_tail] * (m - 1)))


def rqk_eigen(S):
    _count(2)
    lh, Nh = np.linalg.eigh(S.A + S.m * S.K)
    lt, Nt = np.linalg.eigh(S.A)
    return EigenRqk(lh, lt, Nh, Nt, BlockRotation(S.m))


# ---------------------------------------------------------------------------
# general QK matrices


def qk_matvec(Q, x):
    X = stack(x, Q.m, Q.n)
    shared = Q.K @ np.tensordot(Q.v, X, axes=1)
    out = np.einsum("ijk,ik...->ij...", Q.blocks, X) + np.multiply.outer(Q.u, shared)
    return out.reshape(np.shape(x))


class QkFactor:
    """Sherman-Morrison-Woodbury factorization of a QK matrix.

    ``K`` is split as ``L1 L2^t`` from its eigendecomposition ``E S E^t``
    (``L1 = E S``, ``L2 = E``), which keeps the identity valid when ``K``
    is indefinite. The capacitance matrix is n x n:
    ``P = I + L2^t (sum_i u_i v_i A_i^{-1}) L1``.
    """

    def __init__(self, Q):
        self.Q = Q
        m, n = Q.m, Q.n
        sign, logabs = np.linalg.slogdet(Q.blocks)
        bad = np.flatnonzero(sign == 0)
        if bad.size:
            raise SingularBlock(int(bad[0]))
        try:
            self.Cinv = np.linalg.inv(Q.blocks)
        except np.linalg.LinAlgError:
            raise SingularBlock(int(np.argmin(np.abs(logabs)))) from None
        lam, E = np.linalg.eigh(Q.K)
        self.L1 = E * lam
        self.L2 = E
        self.CL1 = self.Cinv @ self.L1
        csum = np.tensordot(Q.u * Q.v, self.Cinv, axes=1)
        P = np.eye(n) + self.L2.T @ csum @ self.L1
        lu, piv = scipy.linalg.lu_factor(P, check_finite=True)
        udiag = np.diag(lu)
        if np.any(udiag == 0) or not np.all(np.isfinite(udiag)):
            raise SingularCapacitance("capacitance matrix is singular")
        self.P_lu = (lu, piv)
        # sign of det(P) from U's diagonal and the pivot parity
        swaps = np.count_nonzero(piv != np.arange(n))
        psign = np.prod(np.sign(udiag)) * (-1.0) ** swaps
        self.sign = float(np.prod(sign) * psign)
        self.logabsdet = float(np.sum(logabs) + np.sum(np.log(np.abs(udiag))))
        self.m, self.n = m, n

    def solve(self, b):
        Q = self.Q
        Bs = stack(b, self.m, self.n)
        mat = Bs.ndim == 3
        if not mat:
            Bs = Bs[..., None]
        c = self.Cinv @ Bs
        t = self.L2.T @ np.tensordot(Q.v, c, axes=1)
        s = scipy.linalg.lu_solve(self.P_lu, t)
        out = c - Q.u[:, None, None] * (self.CL1 @ s)
        return out.reshape(np.shape(b))

    def diag_blocks(self):
        """Diagonal n x n blocks of ``Q^{-1}``."""
        Q = self.Q
        # (Q^{-1})_ii = C_i - u_i v_i C_i L1 P^{-1} L2^t C_i
        right = self.L2.T @ self.Cinv
        sol = scipy.linalg.lu_solve(self.P_lu, np.concatenate(list(right), axis=1))
        sol = sol.reshape(self.n, self.m, self.n).transpose(1, 0, 2)
        return self.Cinv - (Q.u * Q.v)[:, None, None] * (self.CL1 @ sol)

    def block_row_sums(self, wr=None):
        """``R_i = sum_l wr_l (Q^{-1})_il`` for every block row i."""
        Q = self.Q
        wr = np.ones(self.m) if wr is None else np.asarray(wr, dtype=float)
        right = self.L2.T @ np.tensordot(wr * Q.v, self.Cinv, axes=1)
        sol = scipy.linalg.lu_solve(self.P_lu, right)
        return wr[:, None, None] * self.Cinv - Q.u[:, None, None] * (self.CL1 @ sol)

    def block_sum(self, wl=None, wr=None):
        """``sum_ij wl_i wr_j (Q^{-1})_ij`` (all-ones weights by default)."""
        Q = self.Q
        wl = np.ones(self.m) if wl is None else np.asarray(wl, dtype=float)
        wr = np.ones(self.m) if wr is None else np.asarray(wr, dtype=float)
        diag = np.tensordot(wl * wr, self.Cinv, axes=1)
        left = np.tensordot(wl * Q.u, self.CL1, axes=1)
        right = self.L2.T @ np.tensordot(wr * Q.v, self.Cinv, axes=1)
        return diag - left @ scipy.linalg.lu_solve(self.P_lu, right)


def qk_factor(Q):
    return QkFactor(Q)


def qk_solve(Q, b):
    return QkFactor(Q).solve(b)


def qk_logdet(Q):
    """``(sign, log|det Q|)``."""
    F = QkFactor(Q)
    return F.sign, F.logabsdet
