"""Low-rank compression of delta weights.

The main route whitens each delta by the Cholesky factor of its expert's
activation Gram before truncating: with S @ S.T = Gram, the rank-k SVD of
delta @ S minimizes the activation-weighted error ||(delta - approx) @ S||_F,
and S^{-1} is folded back into the right factor by triangular solves. A plain
truncated SVD and a diagonal activation-scaling variant ship as ablations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .linalg import (
    DEFAULT_DAMPING,
    as_matrix,
    cholesky_damped,
    solve_lower_triangular,
    svd,
)
from .moe import Role

RANK_MODES = ("ratio", "fixed", "lossless")


@dataclass(frozen=True)
class DeltaFactor:
    """Rank-k factor pair: u (m x k), v (k x n), with u @ v approximating the delta."""

    u: np.ndarray
    v: np.ndarray
    rank: int
    expert_id: int = -1
    role: Role | None = None

    def __post_init__(self):
        u = as_matrix(self.u, "delta factor u")
        v = as_matrix(self.v, "delta factor v")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        if u.shape[1] != self.rank or v.shape[0] != self.rank:
            raise ShapeError(f"factor shapes {u.shape}, {v.shape} inconsistent with rank {self.rank}")
        if not 1 <= self.rank <= min(u.shape[0], v.shape[1]):
            raise ParameterError(f"rank {self.rank} outside [1, {min(u.shape[0], v.shape[1])}]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v.shape[1])

    def param_count(self) -> int:
        """Stored parameters: exactly (m + n) * k."""
        return (self.u.shape[0] + self.v.shape[1]) * self.rank

    def product(self) -> np.ndarray:
        return self.u @ self.v


@dataclass(frozen=True)
class RankPolicy:
    """How to pick the truncation rank for an m x n delta."""

    mode: str = "ratio"
    p: float | None = None
    k: int | None = None

    def __post_init__(self):
        if self.mode not in RANK_MODES:
            raise ParameterError(f"rank mode must be one of {RANK_MODES}, got {self.mode!r}")
        if self.mode == "ratio":
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise ParameterError(f"ratio mode needs 0 < p <= 1, got {self.p}")
        if self.mode == "fixed" and (self.k is None or self.k < 1):
            raise ParameterError(f"fixed mode needs k >= 1, got {self.k}")

    def rank_for(self, m: int, n: int) -> int:
        if self.mode == "ratio":
            return rank_for_ratio(m, n, self.p)
        if self.mode == "fixed":
            if self.k > min(m, n):
                raise ParameterError(f"fixed rank {self.k} exceeds min(m,n)={min(m, n)}")
            return self.k
        return min(m, n)


def rank_for_ratio(m: int, n: int, p: float) -> int:
    """Largest k with stored factor parameters (m+n)*k <= p*m*n, floored at 1."""
    if m < 1 or n < 1:
        raise ShapeError(f"invalid shape ({m}, {n})")
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"retained-parameter fraction must be in (0, 1], got {p}")
    return max(1, math.floor(p * m * n / (m + n)))


def truncation_aware_svd(delta, gram, k: int, damping: float = DEFAULT_DAMPING,
                         expert_id: int = -1, role: Role | None = None) -> DeltaFactor:
    """Whitened rank-k factorization of a delta weight.

    S = cholesky_damped(gram); (U, Sigma, V) = svd(delta @ S);
    u = U_k sqrt(Sigma_k), v = sqrt(Sigma_k) V_k^T S^{-1} (via a transposed
    triangular solve, no explicit inverse).
    """
    d = as_matrix(delta, "delta")
    g = as_matrix(gram, "gram")
    m, n = d.shape
    if g.shape != (n, n):
        raise ShapeError(f"gram shape {g.shape} != ({n}, {n}) for delta {d.shape}")
    if not 1 <= k <= min(m, n):
        raise ParameterError(f"rank k={k} outside [1, {min(m, n)}]")
    s, _lam = cholesky_damped(g, damping)
    scaled = svd(d @ s).truncate(k)
    root = np.sqrt(scaled.sigma)
    u = scaled.u * root
    # v = sqrt(Sigma) V^T S^{-1}  <=>  v.T = solve(S.T, V sqrt(Sigma))
    v = solve_lower_triangular(s, scaled.v * root, transpose_s=True).T
    return DeltaFactor(u=np.ascontiguousarray(u), v=np.ascontiguousarray(v),
                       rank=k, expert_id=expert_id, role=role)


def vanilla_svd_compress(delta, k: int, expert_id: int = -1, role: Role | None = None) -> DeltaFactor:
    """Plain truncated SVD split as U_k sqrt(Sigma_k), sqrt(Sigma_k) V_k^T."""
    d = as_matrix(delta, "delta")
    if not 1 <= k <= min(d.shape):
        raise ParameterError(f"rank k={k} outside [1, {min(d.shape)}]")
    trunc = svd(d).truncate(k)
    root = np.sqrt(trunc.sigma)
    return DeltaFactor(u=np.ascontiguousarray(trunc.u * root),
                       v=np.ascontiguousarray((trunc.v * root).T),
                       rank=k, expert_id=expert_id, role=role)


def activation_scaled_svd(delta, gram, k: int, expert_id: int = -1,
                          role: Role | None = None) -> DeltaFactor:
    """Ablation variant: whiten by the diagonal per-feature activation norms
    sqrt(diag(gram)) instead of the full Cholesky factor.

    Zero-activation features get unit scale so the diagonal stays invertible.
    """
    d = as_matrix(delta, "delta")
    g = as_matrix(gram, "gram")
    m, n = d.shape
    if g.shape != (n, n):
        raise ShapeError(f"gram shape {g.shape} != ({n}, {n}) for delta {d.shape}")
    if not 1 <= k <= min(m, n):
        raise ParameterError(f"rank k={k} outside [1, {min(m, n)}]")
    scale = np.sqrt(np.maximum(np.diag(g), 0.0))
    scale = np.where(scale > 0.0, scale, 1.0)
    trunc = svd(d * scale).truncate(k)
    root = np.sqrt(trunc.sigma)
    u = trunc.u * root
    v = (trunc.v * root).T / scale
    return DeltaFactor(u=np.ascontiguousarray(u), v=np.ascontiguousarray(v),
                       rank=k, expert_id=expert_id, role=role)


def weighted_error(delta, factor: DeltaFactor, gram) -> float:
    """Activation-weighted residual sqrt(tr(E @ gram @ E.T)), E = delta - u@v.

    Equals ||E @ X||_F whenever gram = X @ X.T; clamped at zero against
    round-off.
    """
    d = as_matrix(delta, "delta")
    g = as_matrix(gram, "gram")
    if factor.shape != d.shape:
        raise ShapeError(f"factor shape {factor.shape} != delta shape {d.shape}")
    if g.shape != (d.shape[1], d.shape[1]):
        raise ShapeError(f"gram shape {g.shape} != ({d.shape[1]}, {d.shape[1]})")
    e = d - factor.product()
    return math.sqrt(max(float(np.einsum("ij,jk,ik->", e, g, e)), 0.0))
