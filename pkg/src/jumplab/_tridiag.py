"""Direct tridiagonal solvers used throughout the grid machinery.

Two flavours: a LAPACK-banded solve for a single matrix with one or many
right-hand sides, and a pure-numpy Thomas sweep vectorized over a batch of
systems whose bands differ row by row (the ensemble stepper needs the
latter: every trajectory carries its own frozen-coefficient matrix).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded


def solve_tridiag(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                  rhs: np.ndarray) -> np.ndarray:
    """Solve one tridiagonal system; rhs may be (n,) or (n, k).

    lower/upper have length n; lower[0] and upper[-1] are ignored.
    """
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def solve_tridiag_batch(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                        rhs: np.ndarray) -> np.ndarray:
    """Thomas sweep on a batch of systems, all arrays shaped (m, n).

    Each row is an independent tridiagonal system (lower[:, 0] and
    upper[:, -1] unused).  The sweep loops over n and vectorizes over the
    batch, so per-member arithmetic is independent of who else is in the
    batch — results for a given member are bitwise identical whatever the
    batch composition.
    """
    m, n = diag.shape
    if n == 1:
        return rhs / diag
    cp = np.empty((m, n - 1))
    dp = np.empty((m, n))
    cp[:, 0] = upper[:, 0] / diag[:, 0]
    dp[:, 0] = rhs[:, 0] / diag[:, 0]
    for j in range(1, n):
        denom = diag[:, j] - lower[:, j] * cp[:, j - 1]
        if j < n - 1:
            cp[:, j] = upper[:, j] / denom
        dp[:, j] = (rhs[:, j] - lower[:, j] * dp[:, j - 1]) / denom
    out = np.empty((m, n))
    out[:, -1] = dp[:, -1]
    for j in range(n - 2, -1, -1):
        out[:, j] = dp[:, j] - cp[:, j] * out[:, j + 1]
    return out
