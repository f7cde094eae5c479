"""Dense float64 linear algebra primitives used by every other module.

Matrices are plain C-ordered ``numpy.ndarray`` objects in 64-bit precision.
``as_matrix`` is the single entry point that enforces the carrier contract
(2-D, float64, finite); everything downstream can then assume it.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericalError, SizeBudgetError

__all__ = [
    "as_matrix",
    "softmax_rows",
    "softmax_jacobian_row",
    "kron",
    "sym_factor",
    "vec",
    "trace_quad",
]

DEFAULT_KRON_BUDGET = 4_000_000  # elements (~32 MB of float64)


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array (copying if needed)."""
    a = np.array(data, dtype=np.float64, order="C")
    if a.ndim != 2:
        raise DataError(f"{name}: expected a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: contains NaN or Inf entries")
    return a


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum.

    Every output row sums to 1 and all entries lie in (0, 1].
    """
    m = as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_jacobian_row(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Jacobian of softmax evaluated at a probability row ``a``.

    Returns diag(a) - outer(a, a), an LxL symmetric matrix whose rows sum
    to zero. ``a`` must be a valid probability vector: nonnegative entries
    summing to 1 within ``tol``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if np.any(a < 0):
        raise DataError("softmax_jacobian_row: negative probability entry")
    total = float(a.sum())
    if abs(total - 1.0) > tol:
        raise DataError(
            f"softmax_jacobian_row: row sums to {total!r}, not 1 within {tol}"
        )
    return np.diag(a) - np.outer(a, a)


def kron(a: np.ndarray, b: np.ndarray, max_elements: int = DEFAULT_KRON_BUDGET) -> np.ndarray:
    """Explicit Kronecker product, guarded by an element budget.

    The dense product has shape (a.rows*b.rows, a.cols*b.cols); this is the
    memory blow-up the trace-form losses exist to avoid, so only oracle-scale
    inputs should ever come through here.
    """
    a = as_matrix(a, "kron left")
    b = as_matrix(b, "kron right")
    n_out = a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1]
    if n_out > max_elements:
        raise SizeBudgetError(
            f"kron: result would hold {n_out} elements, budget is {max_elements}"
        )
    return np.kron(a, b)


def sym_factor(m: np.ndarray, sym_tol: float = 1e-9, eig_tol: float = 1e-9) -> np.ndarray:
    """Symmetric factor G of a PSD matrix, with G @ G.T == m.

    Uses the symmetric eigendecomposition and clamps slightly negative
    eigenvalues to zero, so rank-deficient calibration statistics factor
    cleanly (Cholesky would fail on them). Raises on asymmetric input or
    eigenvalues below -``eig_tol`` relative to the spectral scale.
    """
    m = as_matrix(m, "sym_factor input")
    if m.shape[0] != m.shape[1]:
        raise DataError(f"sym_factor: matrix is {m.shape[0]}x{m.shape[1]}, not square")
    scale = max(1.0, float(np.abs(m).max()))
    if float(np.abs(m - m.T).max()) > sym_tol * scale:
        raise NumericalError("sym_factor: input is not symmetric within tolerance")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -eig_tol * max(1.0, float(w.max())):
        raise NumericalError(
            f"sym_factor: eigenvalue {w.min():.3e} below PSD tolerance"
        )
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def vec(m: np.ndarray) -> np.ndarray:
    """Column-major vectorization, the convention under which
    vec(A B C) = (C^T kron A) vec(B)."""
    return np.asarray(m, dtype=np.float64).ravel(order="F")


def trace_quad(w: np.ndarray, m: np.ndarray) -> float:
    """tr(W M W^T) evaluated as sum((W @ M) * W) without forming the product
    W M W^T; the two expressions are mathematically identical."""
    return float(np.sum((w @ m) * w))
