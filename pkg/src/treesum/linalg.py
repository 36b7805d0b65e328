"""Dense float64 matrix kernels: LU factorization, determinant, inverse, solve.

Sized for the tree-marginalization path (a few hundred rows at most), so the
factorization is a plain partial-pivoting loop with vectorized row updates and
no blocking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A pivot below this magnitude is treated as rank deficiency.
PIVOT_TOLERANCE = 1e-12


class SingularMatrix(ValueError):
    """Raised when a pivot magnitude falls below PIVOT_TOLERANCE."""


@dataclass(frozen=True)
class Matrix:
    """Immutable row-major float64 matrix with finite entries."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self) -> None:
        d = self.data
        if not isinstance(d, np.ndarray) or d.dtype != np.float64:
            raise ValueError("Matrix.data must be a float64 ndarray")
        if d.shape != (self.rows, self.cols):
            raise ValueError(f"Matrix shape {d.shape} != ({self.rows}, {self.cols})")
        if not np.isfinite(d).all():
            raise ValueError("Matrix entries must be finite")

    @property
    def is_square(self) -> bool:
        return self.rows == self.cols


def matrix(values) -> Matrix:
    """Build a Matrix from nested lists or an ndarray (copied, made read-only)."""
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return Matrix(arr.shape[0], arr.shape[1], arr)


def identity(n: int) -> Matrix:
    return matrix(np.eye(n))


@dataclass(frozen=True)
class LuFactors:
    """Packed LU factors of P*A with row-swap records and permutation sign.

    ``pivots[k]`` is the row swapped with row k at elimination step k.
    """

    lu: Matrix
    pivots: tuple[int, ...]
    parity: int


def lu_decompose(a: Matrix) -> LuFactors:
    """Partial-pivoting LU factorization. Deterministic for identical input.

    Raises SingularMatrix when the best available pivot magnitude drops below
    PIVOT_TOLERANCE.
    """
    if not a.is_square:
        raise ValueError(f"lu_decompose requires a square matrix, got {a.rows}x{a.cols}")
    n = a.rows
    lu = a.data.copy()
    pivots = []
    parity = 1
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < PIVOT_TOLERANCE:
            raise SingularMatrix(f"pivot {abs(lu[p, k]):.3e} below {PIVOT_TOLERANCE:.0e} at step {k}")
        pivots.append(p)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            parity = -parity
        if k + 1 < n:
            lu[k + 1 :, k] /= lu[k, k]
            lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    lu.setflags(write=False)
    return LuFactors(Matrix(n, n, lu), tuple(pivots), parity)


def determinant(f: LuFactors) -> float:
    return float(f.parity * np.prod(np.diag(f.lu.data)))


def slogdet(f: LuFactors) -> tuple[float, float]:
    """(sign, log|det|) from the factors; safe when the product would overflow."""
    d = np.diag(f.lu.data)
    sign = float(f.parity * np.prod(np.sign(d)))
    return sign, float(np.sum(np.log(np.abs(d))))


def solve(f: LuFactors, b: Matrix) -> Matrix:
    """Solve A x = b for each column of b using the factors of A."""
    n = f.lu.rows
    if b.rows != n:
        raise ValueError(f"rhs has {b.rows} rows, expected {n}")
    lu = f.lu.data
    x = b.data.copy()
    for k, p in enumerate(f.pivots):
        if p != k:
            x[[k, p]] = x[[p, k]]
    for i in range(1, n):  # unit lower triangle
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):  # upper triangle
        x[i] -= lu[i, i + 1 :] @ x[i + 1 :]
        x[i] /= lu[i, i]
    x.setflags(write=False)
    return Matrix(n, b.cols, x)


def inverse(f: LuFactors) -> Matrix:
    return solve(f, identity(f.lu.rows))


def inverse_array(a: np.ndarray) -> np.ndarray:
    """Convenience: inverse of a raw float64 square array via the LU path."""
    return inverse(lu_decompose(matrix(a))).data


def slogdet_array(a: np.ndarray) -> tuple[float, float]:
    return slogdet(lu_decompose(matrix(a)))
