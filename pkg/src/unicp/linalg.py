"""Dense real linear algebra: matmul, row softmax, symmetric eigensolver, norms.

Matrices are plain float64 numpy arrays (row-major, 2-D). Everything here is
a pure function over immutable inputs and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative-norm floor: rel_l2 divides by max(||ref||, EPS_NORM).
EPS_NORM = 1e-12

# Jacobi eigensolver: stop when the off-diagonal Frobenius norm falls below
# JACOBI_TOL * max(1, ||M||_F), give up after JACOBI_MAX_SWEEPS full sweeps.
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConvergenceError(RuntimeError):
    """Iterative solver hit its iteration cap; carries the final residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def as_matrix(x) -> np.ndarray:
    """Coerce input to a 2-D float64 array without copying when possible."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Dense product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: left is {a.shape[0]}x{a.shape[1]}, "
            f"right is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    a = as_matrix(m)
    if a.size == 0:
        raise ShapeError("softmax_rows requires a nonempty matrix")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def frob(a) -> float:
    """Frobenius norm over all entries (any array shape)."""
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def rel_l2(a, b) -> float:
    """Relative Frobenius distance ||a - b|| / max(||b||, EPS_NORM).

    The second argument is the reference. Scale-free, which is what makes a
    single error threshold usable across blocks of different widths.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rel_l2 shape mismatch: {a.shape} vs {b.shape}")
    return frob(a - b) / max(frob(b), EPS_NORM)


@dataclass(frozen=True)
class EigResult:
    """Symmetric eigendecomposition, eigenvalues sorted descending.

    Column j of `eigenvectors` pairs with `eigenvalues[j]`; columns are unit
    vectors with the largest-magnitude entry made positive so repeated runs
    produce identical signs.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _off_diag_norm(a: np.ndarray) -> float:
    # Summing the off-diagonal entries directly; subtracting diagonal mass
    # from the total cancels catastrophically for large-norm matrices.
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return frob(off)


def sym_eig(m) -> EigResult:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    The input is symmetrized as (M + M^T)/2 first. Robust for the sizes this
    engine uses (up to a few hundred); convergence failure raises
    ConvergenceError carrying the off-diagonal residual.
    """
    a = as_matrix(m)
    n_rows, n_cols = a.shape
    if n_rows != n_cols:
        raise ShapeError(f"sym_eig requires a square matrix, got {a.shape}")
    a = (a + a.T) / 2.0
    n = n_rows
    v = np.eye(n)
    if n == 1:
        return EigResult(eigenvalues=a[0].copy(), eigenvectors=v)

    scale = max(1.0, frob(a))
    tol = JACOBI_TOL * scale
    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        if _off_diag_norm(a) <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol / (n * n):
                    continue
                # Givens rotation zeroing a[p, q].
                theta = 0.5 * np.arctan2(2.0 * apq, a[q, q] - a[p, p])
                c = np.cos(theta)
                s = np.sin(theta)
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :] = rot_p
                a[q, :] = rot_q
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p] = rot_p
                a[:, q] = rot_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p] = rot_p
                v[:, q] = rot_q
    else:
        converged = _off_diag_norm(a) <= tol
    if not converged:
        residual = _off_diag_norm(a)
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps "
            f"(off-diagonal residual {residual:.3e})",
            residual,
        )

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    v = v[:, order]
    # Deterministic sign: flip columns whose largest-magnitude entry is negative.
    for j in range(n):
        idx = int(np.argmax(np.abs(v[:, j])))
        if v[idx, j] < 0:
            v[:, j] = -v[:, j]
    return EigResult(eigenvalues=eigenvalues, eigenvectors=v)
