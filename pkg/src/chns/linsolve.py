"""Sparse direct solves with an optional mean-zero Lagrange multiplier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RTOL = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    """The factorization hit a zero pivot or produced non-finite values."""


class ResidualError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray
    constraint: np.ndarray | None = None


def border(matrix: sp.spmatrix, constraint: np.ndarray) -> sp.csc_matrix:
    """Append the row and column ``constraint`` (and a zero corner) to ``matrix``."""
    c = sp.csc_matrix(np.asarray(constraint, dtype=float).reshape(-1, 1))
    return sp.bmat([[matrix, c], [c.T, None]], format="csc")


class Factorization:
    """LU factors of a square sparse matrix, reusable for many right-hand sides.

    With ``constraint`` the factored matrix is the bordered system
    ``[[A, c], [c^T, 0]]``, which pins ``c . x = 0`` and removes a constant
    null space of ``A`` without touching individual dofs.

    ``saddle=True`` asks for diagonal pivots in the fill-reducing order.
    Partial pivoting on saddle matrices with a zero block tends to pick
    off-diagonal pivots and wreck the ordering (fill grows by orders of
    magnitude); if the diagonal factor misses the residual bound the
    matrix is refactored with partial pivoting.
    """

    def __init__(self, matrix: sp.spmatrix, constraint: np.ndarray | None = None,
                 rtol: float = RTOL, refine: int = 3, saddle: bool = False):
        a = sp.csc_matrix(matrix)
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"matrix must be square, got {a.shape}")
        self.n = a.shape[0]
        self.bordered = constraint is not None
        self.matrix = border(a, constraint) if self.bordered else a
        self.rtol = rtol
        self.refine = refine
        self.pivoting = not saddle
        try:
            self._factor()
        except SingularSystemError:
            if self.pivoting:
                raise
            self.pivoting = True
            self._factor()

    def _factor(self):
        try:
            self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A",
                                 diag_pivot_thresh=1.0 if self.pivoting else 0.0)
        except RuntimeError as exc:
            raise SingularSystemError(f"sparse LU failed: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        try:
            return self._solve(rhs)
        except (ResidualError, SingularSystemError):
            if self.pivoting:
                raise
            self.pivoting = True
            self._factor()
            return self._solve(rhs)

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if self.bordered:
            b = np.concatenate([b, np.zeros((1,) + b.shape[1:])])
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("sparse LU produced non-finite values (singular matrix?)")
        bnorm = np.linalg.norm(b)
        r = b - self.matrix @ x
        for _ in range(self.refine):
            if np.linalg.norm(r) <= 0.1 * self.rtol * bnorm:
                break
            x += self._lu.solve(r)
            r = b - self.matrix @ x
        rnorm = np.linalg.norm(r)
        if rnorm > self.rtol * bnorm:
            raise ResidualError(f"relative residual {rnorm / bnorm:.3e} exceeds {self.rtol:.1e}")
        return x[: self.n] if self.bordered else x


def solve(system: LinearSystem, rtol: float = RTOL) -> np.ndarray:
    """Solve ``system`` with a sparse direct factorization.

    Raises :class:`SingularSystemError` on pivot failure and
    :class:`ResidualError` when the returned solution misses the relative
    residual bound ``rtol``.
    """
    return Factorization(system.matrix, system.constraint, rtol=rtol).solve(system.rhs)
