"""Deterministic dense linear-algebra primitives.

Everything here operates on plain numpy float64 arrays in C order ("matrices"
below). Results are deterministic for identical inputs: the SVD applies a
fixed sign convention so factor files are reproducible across runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    NotPositiveDefiniteError,
    ParameterError,
    ShapeError,
    SingularTriangularError,
    SvdConvergenceError,
)

# Damped-Cholesky schedule: lambda0 = DEFAULT_DAMPING * trace/dim, doubled on
# failure, at most MAX_DAMPING_DOUBLINGS attempts.
DEFAULT_DAMPING = 1e-8
MAX_DAMPING_DOUBLINGS = 10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite float64 2-D C-order array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name}: degenerate shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and return `a` as a finite float64 1-D array."""
    v = np.ascontiguousarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name}: expected 1-D array, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return v


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD M = u @ diag(sigma) @ v.T with sigma descending.

    u is m x r, sigma has length r = min(m, n), v is n x r. The sign of each
    (u column, v column) pair is fixed so the first nonzero entry of the u
    column is positive.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def truncate(self, k: int) -> "SvdResult":
        if not 1 <= k <= self.sigma.shape[0]:
            raise ParameterError(f"rank k={k} outside [1, {self.sigma.shape[0]}]")
        return SvdResult(self.u[:, :k], self.sigma[:k], self.v[:, :k])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def svd(m) -> SvdResult:
    """Thin SVD with deterministic signs.

    Sign convention: the first nonzero entry of every u column is made
    positive, with the matching v column flipped alongside.
    """
    a = as_matrix(m, "svd input")
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge on shape {a.shape}") from exc
    v = vt.T
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return SvdResult(np.ascontiguousarray(u), sigma, np.ascontiguousarray(v))


def cholesky_damped(g, base_damping: float = DEFAULT_DAMPING) -> tuple[np.ndarray, float]:
    """Lower-triangular S with S @ S.T = G + lambda*I, returned as (S, lambda).

    lambda starts at base_damping * trace(G)/dim (floored at base_damping when
    the trace vanishes, e.g. the all-zero Gram of a never-routed expert) and
    doubles until the factorization succeeds, at most MAX_DAMPING_DOUBLINGS
    attempts.
    """
    a = as_matrix(g, "gram")
    n_rows, n_cols = a.shape
    if n_rows != n_cols:
        raise ShapeError(f"gram must be square, got {a.shape}")
    sym_gap = float(np.max(np.abs(a - a.T), initial=0.0))
    scale = float(np.max(np.abs(a), initial=0.0))
    if sym_gap > 1e-9 * max(scale, 1.0):
        raise ShapeError(f"gram not symmetric within tolerance (gap {sym_gap:.3e})")
    if base_damping < 0:
        raise ParameterError(f"base_damping must be >= 0, got {base_damping}")

    trace = float(np.trace(a))
    lam = base_damping * trace / n_rows
    if lam <= 0.0:
        lam = base_damping if base_damping > 0.0 else np.finfo(np.float64).tiny
    for _ in range(MAX_DAMPING_DOUBLINGS):
        try:
            s = np.linalg.cholesky(a + lam * np.eye(n_rows))
        except np.linalg.LinAlgError:
            lam *= 2.0
            continue
        return np.ascontiguousarray(s), lam
    raise NotPositiveDefiniteError(
        f"cholesky failed after {MAX_DAMPING_DOUBLINGS} damping doublings "
        f"(shape {a.shape}, final lambda {lam:.3e})"
    )


def solve_lower_triangular(s, rhs, transpose_s: bool = False) -> np.ndarray:
    """Solve S @ Z = rhs (or S.T @ Z = rhs with transpose_s) for lower-triangular S.

    transpose_s lets callers right-multiply by S^{-1} without forming an
    inverse: X @ S^{-1} = solve(S.T, X.T).T.
    """
    a = as_matrix(s, "triangular factor")
    b = as_matrix(rhs, "rhs")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"triangular factor must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"rhs rows {b.shape[0]} != factor dim {a.shape[0]}")
    diag = np.diag(a)
    if np.any(diag == 0.0):
        j = int(np.nonzero(diag == 0.0)[0][0])
        raise SingularTriangularError(f"zero diagonal entry at index {j}")
    z = scipy.linalg.solve_triangular(a, b, lower=True, trans="T" if transpose_s else "N")
    return np.ascontiguousarray(z)


def col_l2_norms(m) -> np.ndarray:
    """Euclidean norm of every column."""
    a = as_matrix(m, "col_l2_norms input")
    return np.linalg.norm(a, axis=0)


def row_l2_norms(m) -> np.ndarray:
    """Euclidean norm of every row."""
    a = as_matrix(m, "row_l2_norms input")
    return np.linalg.norm(a, axis=1)
