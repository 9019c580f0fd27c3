"""Dense SPD linear algebra used by every bound.

Inverses are always expressed through Cholesky solves; nothing in the
package calls an explicit matrix inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, NotPositiveDefinite

# relative to mean(diag(A))
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
# a rung whose smallest eigenvalue falls below this (relative to mean(diag(A)))
# is numerically singular: gradients through K^{-1} lose ~eps * cond^2, so
# the next rung is tried instead
EIGEN_FLOOR = 1e-4


@dataclass(frozen=True)
class SpdMatrix:
    """A symmetric positive-definite matrix with its cached Cholesky factor.

    ``chol @ chol.T == values + jitter_applied * I``.
    """

    values: np.ndarray
    chol: np.ndarray
    jitter_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def solve(self, B: np.ndarray) -> np.ndarray:
        """Return (A + jitter I)^{-1} B."""
        return sla.cho_solve((self.chol, True), B, check_finite=False)

    def inverse(self) -> np.ndarray:
        # Needed for per-datum traces tr(K^{-1} Phi_n); computed by solves.
        Ki = self.solve(np.eye(self.dim))
        return 0.5 * (Ki + Ki.T)


def cholesky_with_jitter(A: np.ndarray) -> SpdMatrix:
    """Factorize a symmetric matrix, escalating diagonal jitter on failure.

    Tries ``A + j * mean(diag(A)) * I`` for each ``j`` in :data:`JITTER_LADDER`
    and returns the first success. A rung succeeds when the factorization
    exists and the smallest eigenvalue of the jittered matrix is at least
    about ``EIGEN_FLOOR * mean(diag(A))``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = float(np.mean(np.diag(A)))
    if scale <= 0.0:
        scale = 1.0
    n = A.shape[0]
    lam_min = float(np.linalg.eigvalsh(A)[0])
    for rung in JITTER_LADDER:
        jitter = rung * scale
        try:
            chol = np.linalg.cholesky(A + jitter * np.eye(n) if jitter else A)
        except np.linalg.LinAlgError:
            continue
        if lam_min + jitter >= 0.5 * EIGEN_FLOOR * scale:
            return SpdMatrix(values=A, chol=chol, jitter_applied=jitter)
    raise NotPositiveDefinite(
        "Cholesky failed at every jitter level; check kernel hyperparameters "
        "and look for duplicated inducing inputs"
    )


def tri_solve(L: np.ndarray, B: np.ndarray, side: str = "lower") -> np.ndarray:
    """Solve ``L X = B`` (side="lower") or ``L^T X = B`` (side="lower-transpose")."""
    L = np.asarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"cannot solve {L.shape} against {B.shape}")
    if side == "lower":
        trans = 0
    elif side == "lower-transpose":
        trans = 1
    else:
        raise ValueError(f"unknown side {side!r}")
    return sla.solve_triangular(L, B, lower=True, trans=trans, check_finite=False)


def log_det(A: SpdMatrix) -> float:
    """Log determinant of the (jittered) factorized matrix."""
    return 2.0 * float(np.sum(np.log(np.diag(A.chol))))
