"""Exception hierarchy shared by all rqk modules."""

import numpy as np


class RqkError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(RqkError, ValueError):
    pass


class CapExceeded(RqkError, MemoryError):
    pass


class NotPositiveDefinite(RqkError, np.linalg.LinAlgError):
    """A Cholesky or eigen factorization met a non-positive pivot.

    ``which`` names the matrix that failed (``"A"`` or ``"A+mK"`` for
    rQK factors).
    """

    def __init__(self, which, msg=None):
        self.which = which
        super().__init__(msg or f"matrix {which} is not positive definite")


class PositiveDefiniteViolation(NotPositiveDefinite):
    """Kernel matrix could not be factorized even with jitter."""


class SingularMatrix(RqkError, np.linalg.LinAlgError):
    pass


class SingularFactor(SingularMatrix):
    pass


class SingularBlock(SingularMatrix):
    def __init__(self, index):
        self.index = index
        super().__init__(f"diagonal block {index} is singular")


class SingularCapacitance(SingularMatrix):
    pass


class NonFiniteObjective(RqkError, FloatingPointError):
    pass


class LineSearchFailed(RqkError, RuntimeError):
    pass


class OptimizerDiverged(RqkError, RuntimeError):
    pass


class MaxIterExceeded(RqkError, RuntimeError):
    pass


class NonConcave(RqkError, ValueError):
    pass


class NonSPDHessian(RqkError, np.linalg.LinAlgError):
    pass


class EmptyMixture(RqkError, ValueError):
    pass


class ParseError(RqkError, ValueError):
    pass
