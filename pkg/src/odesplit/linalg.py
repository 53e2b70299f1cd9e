"""Dense LU with partial pivoting, batched over a leading axis.

The inner linear systems of implicit stage solves are small (state dimension
at most 64) and dense, but there is one per point, so factorization and
substitution are vectorized over the batch.  The transpose solve reuses the
same factors, which the adjoint stage solves rely on.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SingularPivotError", "lu_factor", "lu_solve", "solve"]

PIVOT_FLOOR = 1e-300


class SingularPivotError(ArithmeticError):
    """Raised when a pivot magnitude falls below the representable floor."""

    def __init__(self, column, batch_index):
        self.column = column
        self.batch_index = batch_index
        super().__init__(
            f"singular pivot in column {column}"
            + (f" (batch item {batch_index})" if batch_index is not None else "")
        )


def lu_factor(a):
    """Factor P A = L U in packed form.

    a: (m, m) or (B, m, m).  Returns (lu, piv) with unit-lower L and U packed
    into one array and piv[k] the row swapped with k at elimination step k.
    """
    a = np.array(a, dtype=float)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != a.shape[-2]:
        raise ValueError("expected square matrices")
    nb, m, _ = a.shape
    piv = np.empty((nb, m), dtype=np.int64)
    rows = np.arange(nb)
    for k in range(m):
        pk = np.abs(a[:, k:, k]).argmax(axis=1) + k
        piv[:, k] = pk
        tmp = a[rows, k, :].copy()
        a[rows, k, :] = a[rows, pk, :]
        a[rows, pk, :] = tmp
        pivots = a[:, k, k]
        small = np.abs(pivots) < PIVOT_FLOOR
        if small.any():
            raise SingularPivotError(k, int(np.argmax(small)) if not single else None)
        if k + 1 < m:
            a[:, k + 1 :, k] /= pivots[:, None]
            a[:, k + 1 :, k + 1 :] -= (
                a[:, k + 1 :, k : k + 1] * a[:, k : k + 1, k + 1 :]
            )
    if single:
        return a[0], piv[0]
    return a, piv


def lu_solve(lu, piv, b, trans=False):
    """Solve A x = b (or A^T x = b when trans) from packed factors.

    b: (m,), (B, m) matching a batched factorization, or (m,)/(B, m) with
    single factors broadcast over the batch.
    """
    lu = np.asarray(lu)
    piv = np.asarray(piv)
    single_factors = lu.ndim == 2
    if single_factors:
        lu, piv = lu[None], piv[None]
    m = lu.shape[-1]
    x = np.array(b, dtype=float)
    single_rhs = x.ndim == 1
    if single_rhs:
        x = x[None]
    if lu.shape[0] == 1 and x.shape[0] > 1:
        lu = np.broadcast_to(lu, (x.shape[0], m, m))
        piv = np.broadcast_to(piv, (x.shape[0], m))
    nb = x.shape[0]
    rows = np.arange(nb)
    if not trans:
        for k in range(m):
            pk = piv[:, k]
            tmp = x[rows, k].copy()
            x[rows, k] = x[rows, pk]
            x[rows, pk] = tmp
        for k in range(m):  # L y = P b, unit diagonal
            x[:, k + 1 :] -= lu[:, k + 1 :, k] * x[:, k : k + 1]
        for k in range(m - 1, -1, -1):  # U x = y
            x[:, k] /= lu[:, k, k]
            x[:, :k] -= lu[:, :k, k] * x[:, k : k + 1]
    else:
        # A^T = U^T L^T P: forward with U^T, backward with L^T, then P^T
        for k in range(m):
            x[:, k] /= lu[:, k, k]
            x[:, k + 1 :] -= lu[:, k, k + 1 :] * x[:, k : k + 1]
        for k in range(m - 1, -1, -1):
            x[:, :k] -= lu[:, k, :k] * x[:, k : k + 1]
        for k in range(m - 1, -1, -1):
            pk = piv[:, k]
            tmp = x[rows, k].copy()
            x[rows, k] = x[rows, pk]
            x[rows, pk] = tmp
    return x[0] if single_rhs else x


def solve(a, b, trans=False):
    """Factor-and-solve convenience wrapper."""
    lu, piv = lu_factor(a)
    return lu_solve(lu, piv, b, trans=trans)
