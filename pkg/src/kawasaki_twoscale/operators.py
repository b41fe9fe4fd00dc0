"""Lattice operator A, projections P and NP^t, mesoscopic operator Abar, fiber split.

Matrices act on B-spline coefficient vectors. With ``L`` the ``N x M`` lift
matrix (column j is NP^t B_j) and ``G`` the Gram matrix,

* ``P x = G^{-1} L^T x / N``
* ``NP^t y = L c``
* ``PNP^t = G^{-1} T`` with ``T = L^T L / N``
* ``Abar = G^{-1} S`` with ``S = L^T A L / N``

``T`` and ``S`` are symmetric, so PNP^t and Abar are self-adjoint for the
L^2 inner product ``c^T G c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import AssemblyError, ConditioningError, MultiscaleGrid
from .piecewise import PiecewisePoly
from .splines import (LEFT_TAIL, MIDDLE, RIGHT_TAIL, SplineField, gram_by_integration,
                      gram_matrix, local_coefficients, piece_coefficients)


def apply_A(x, N: int | None = None):
    """(Ax)_i = N^2 (2 x_i - x_{i-1} - x_{i+1}), periodic, along the last axis."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1] if N is None else N
    return N * N * (2.0 * x - np.roll(x, 1, axis=-1) - np.roll(x, -1, axis=-1))


def lift_matrix(grid: MultiscaleGrid) -> np.ndarray:
    """Columns are NP^t B_j: cell averages of each B-spline, times nothing else."""
    N, M, K = grid.N, grid.M, grid.K
    i = np.arange(N)
    m, r = i // K, i % K
    moments = np.stack([np.ones(N), (2 * r + 1) / (2.0 * K), (3.0 * r * r + 3 * r + 1) / (3.0 * K * K)], axis=-1)
    L = np.zeros((N, M))
    for shift, piece in ((-1, RIGHT_TAIL), (0, MIDDLE), (1, LEFT_TAIL)):
        np.add.at(L, (i, (m + shift) % M), moments @ piece)
    return L


def mean_zero_basis(M: int) -> np.ndarray:
    """Orthonormal (Euclidean) basis ``M x (M-1)`` of coefficient vectors summing to 0."""
    Q, _ = np.linalg.qr(np.column_stack([np.ones(M), np.eye(M)[:, : M - 1]]))
    return Q[:, 1:]


@dataclass(frozen=True, eq=False)
class OperatorCache:
    """Assembled operators for one grid. Immutable; safe to share between threads."""

    grid: MultiscaleGrid
    gram: np.ndarray
    lift: np.ndarray
    lift_gram: np.ndarray       # T
    stiffness: np.ndarray       # S
    pnpt: np.ndarray
    abar: np.ndarray
    defect: float
    pnpt_eigs: np.ndarray
    abar_eigs: np.ndarray
    _gram_cho: tuple = field(repr=False)
    _T_cho: tuple = field(repr=False)
    _S_cho: tuple = field(repr=False)

    @property
    def N(self):
        return self.grid.N

    @property
    def M(self):
        return self.grid.M

    @property
    def K(self):
        return self.grid.K

    def gram_solve(self, b):
        return _cho_solve_last(self._gram_cho, b)

    def T_solve(self, b):
        return _cho_solve_last(self._T_cho, b)

    def S_solve(self, b):
        """Solve S u = b with sum(u) = 0; ``b`` must sum to zero."""
        return _cho_solve_last(self._S_cho, b)


def _cho_solve_last(cho, b):
    b = np.asarray(b, dtype=float)
    flat = b.reshape(-1, b.shape[-1]).T
    return linalg.cho_solve(cho, flat).T.reshape(b.shape)


def assemble(grid: MultiscaleGrid, min_pnpt_eig: float = 0.5, check_gram: bool = True) -> OperatorCache:
    """Assemble and validate every operator for ``grid``.

    Raises ``ConditioningError`` if the smallest eigenvalue of PNP^t falls
    below ``min_pnpt_eig`` and ``AssemblyError`` if Abar is not positive
    definite on mean-zero splines.
    """
    N, M = grid.N, grid.M
    G = gram_matrix(M)
    if check_gram and np.abs(G - gram_by_integration(M)).max() > 1e-12:
        raise AssemblyError("closed-form Gram matrix disagrees with exact integration")
    L = lift_matrix(grid)
    T = L.T @ L / N
    S = L.T @ apply_A(L.T, N).T / N
    S = 0.5 * (S + S.T)
    T = 0.5 * (T + T.T)

    pnpt_eigs = linalg.eigh(T, G, eigvals_only=True)
    if pnpt_eigs.min() < min_pnpt_eig:
        raise ConditioningError(
            f"PNP^t has eigenvalue {pnpt_eigs.min():.3g} < {min_pnpt_eig} at N={N}, M={M}; increase K"
        )
    defect = float(np.abs(pnpt_eigs - 1.0).max())

    if M > 1:
        Z = mean_zero_basis(M)
        abar_eigs = linalg.eigh(Z.T @ S @ Z, Z.T @ G @ Z, eigvals_only=True)
    else:
        abar_eigs = np.zeros(0)
    if abar_eigs.size and abar_eigs.min() <= 1e-12 * abar_eigs.max():
        raise AssemblyError(f"Abar is not positive definite on mean-zero splines (N={N}, M={M})")

    ones = np.ones(M)
    tau = max(np.trace(S) / M, 1.0) / M
    S_defl = S + tau * np.outer(ones, ones)

    return OperatorCache(
        grid=grid, gram=G, lift=L, lift_gram=T, stiffness=S,
        pnpt=linalg.solve(G, T, assume_a="pos"), abar=linalg.solve(G, S, assume_a="pos"),
        defect=defect, pnpt_eigs=pnpt_eigs, abar_eigs=abar_eigs,
        _gram_cho=linalg.cho_factor(G), _T_cho=linalg.cho_factor(T), _S_cho=linalg.cho_factor(S_defl),
    )


_CACHES: dict = {}


def get_cache(N: int, M: int, K_min: int = 4) -> OperatorCache:
    """Memoised ``assemble`` keyed by (N, M)."""
    key = (N, M, K_min)
    if key not in _CACHES:
        _CACHES[key] = assemble(MultiscaleGrid(N, M, K_min))
    return _CACHES[key]


# --- projections ---------------------------------------------------------

def _coeffs(y):
    return np.asarray(y.coeffs if isinstance(y, SplineField) else y, dtype=float)


def project_lattice(cache: OperatorCache, x) -> np.ndarray:
    """B-spline coefficients of P x for lattice vectors ``x[..., N]``."""
    x = np.asarray(x, dtype=float)
    return cache.gram_solve(x @ cache.lift / cache.N)


def project_P(cache: OperatorCache, f) -> SplineField:
    """L^2-orthogonal projection onto the spline space.

    ``f`` may be a lattice vector (step function), a ``SplineField`` (of any
    piece count) or a ``PiecewisePoly``; all moments are integrated exactly.
    The result is re-centred to mean zero.
    """
    if isinstance(f, SplineField):
        if f.M == cache.M:
            c = np.array(f.coeffs)
            return SplineField(c - c.mean(axis=-1, keepdims=True))
        f = f.to_piecewise()
    if isinstance(f, PiecewisePoly):
        basis = PiecewisePoly(local_coefficients(np.eye(cache.M)))
        fb = PiecewisePoly(f.coef[..., None, :, :])
        c = cache.gram_solve((fb * basis).integral())
    else:
        c = project_lattice(cache, f)
    return SplineField(c - c.mean(axis=-1, keepdims=True))


def project_function(cache: OperatorCache, fn, order: int = 10) -> SplineField:
    """Projection of a smooth callable using Gauss-Legendre moments per piece."""
    M = cache.M
    u, w = np.polynomial.legendre.leggauss(order)
    u, w = 0.5 * (u + 1.0), 0.5 * w
    theta = (np.arange(M)[:, None] + u[None, :]) / M
    vals = np.asarray(fn(theta), dtype=float)                    # (..., M, q)
    V = np.stack([np.ones_like(u), u, u * u], axis=-1)           # (q, 3)
    piece_moments = np.einsum("...mq,q,qp->...mp", vals, w, V) / M
    b = np.zeros(vals.shape[:-2] + (M,))
    for shift, piece in ((-1, RIGHT_TAIL), (0, MIDDLE), (1, LEFT_TAIL)):
        # B_j's right tail lives on piece j + 1, its left tail on piece j - 1
        b += np.roll(piece_moments @ piece, shift, axis=-1)
    c = cache.gram_solve(b)
    return SplineField(c - c.mean(axis=-1, keepdims=True))


def lift_NPt(cache: OperatorCache, y) -> np.ndarray:
    """(NP^t y)_i = N * integral of y over cell i."""
    return _coeffs(y) @ cache.lift.T


def lift_NPt_closed_form(cache: OperatorCache, y) -> np.ndarray:
    """Same map from the global piece coefficients (alpha, beta, gamma).

    Uses 1-based site index ``i``; kept separate from ``lift_NPt`` as an
    independent evaluation path.
    """
    pc = piece_coefficients(_coeffs(y))
    N, K = cache.N, cache.K
    i = np.arange(1, N + 1, dtype=float)
    j = (np.arange(N) // K)
    alpha, beta, gamma = pc[..., j, 0], pc[..., j, 1], pc[..., j, 2]
    return alpha / N ** 2 * (i * i - i + 1.0 / 3.0) + beta / N * (i - 0.5) + gamma


def apply_ANPt(cache: OperatorCache, y) -> np.ndarray:
    """A NP^t y from the per-block curvatures alone.

    Interior sites of block j get -2 alpha_j; the last site of a block adds
    (alpha_j - alpha_{j+1}) / 3 and the first adds (alpha_j - alpha_{j-1}) / 3.
    """
    alpha = piece_coefficients(_coeffs(y))[..., 0]
    K = cache.K
    z = np.repeat(-2.0 * alpha, K, axis=-1)
    z[..., K - 1:: K] += (alpha - np.roll(alpha, -1, axis=-1)) / 3.0
    z[..., 0:: K] += (alpha - np.roll(alpha, 1, axis=-1)) / 3.0
    return z


def apply_abar(cache: OperatorCache, y) -> np.ndarray:
    return _coeffs(y) @ cache.abar.T


def assemble_abar(cache: OperatorCache) -> np.ndarray:
    """Matrix of Abar on B-spline coefficients."""
    return cache.abar


def solve_abar(cache: OperatorCache, y) -> np.ndarray:
    """Coefficients of Abar^{-1} y for mean-zero ``y``."""
    c = _coeffs(y)
    return cache.S_solve(c @ cache.gram)


def solve_pnpt(cache: OperatorCache, y) -> np.ndarray:
    """Coefficients of (PNP^t)^{-1} y."""
    return cache.T_solve(_coeffs(y) @ cache.gram)


def apply_ANPt_abar_inv(cache: OperatorCache, y) -> np.ndarray:
    """A NP^t Abar^{-1} y as a lattice vector."""
    return apply_A(lift_NPt(cache, solve_abar(cache, y)), cache.N)


def fiber_decompose(cache: OperatorCache, x):
    """Split ``x`` into ``(x_par, x_perp)`` with P x_par = 0, x_perp in range NP^t."""
    x = np.asarray(x, dtype=float)
    coeff = cache.T_solve(x @ cache.lift / cache.N)
    x_perp = coeff @ cache.lift.T
    return x - x_perp, x_perp


def fiber_foot(cache: OperatorCache, y) -> np.ndarray:
    """NP^t (PNP^t)^{-1} y: the point of the fiber {Px = y} closest to the origin."""
    return lift_NPt(cache, solve_pnpt(cache, y))


def project_fiber_direction(cache: OperatorCache, v) -> np.ndarray:
    """Euclidean projection onto ker P within the mean-zero hyperplane."""
    v = np.asarray(v, dtype=float)
    v = v - v.mean(axis=-1, keepdims=True)
    return fiber_decompose(cache, v)[0]


# --- measured constants ---------------------------------------------------

def pnpt_defect(cache: OperatorCache) -> float:
    """Spectral norm of PNP^t - id on the spline space (exact eigen-solve)."""
    return cache.defect


def sigma_constant(cache: OperatorCache) -> float:
    """Largest sigma with |A NP^t Abar^{-1} y|_{L^2} <= |y|_{L^2} / sigma on mean-zero y."""
    Z = mean_zero_basis(cache.M)
    W = apply_A(lift_NPt(cache, solve_abar(cache, Z.T)), cache.N)   # (M-1, N)
    num = W @ W.T / cache.N
    den = Z.T @ cache.gram @ Z
    lam = linalg.eigh(num, den, eigvals_only=True).max()
    return float(1.0 / np.sqrt(lam))


def fiber_poincare_constant(cache: OperatorCache) -> float:
    """Smallest gamma with |x_par|^2 <= gamma / M^2 * x.Ax on X_N."""
    N, M = cache.N, cache.M
    k = np.arange(N)
    eig = 4.0 * N * N * np.sin(np.pi * k / N) ** 2
    inv = np.where(k == 0, 0.0, 1.0 / np.where(k == 0, 1.0, eig))
    # A^+ = C diag(inv) C^T in the real Fourier basis, built densely
    F = np.fft.fft(np.eye(N), axis=0) / np.sqrt(N)
    A_pinv = np.real(F.conj().T @ (inv[:, None] * F))
    Pi = np.eye(N) - 1.0 / N
    Pi = fiber_decompose(cache, Pi)[0]
    Pi = 0.5 * (Pi + Pi.T)
    lam = np.linalg.eigvalsh(Pi @ A_pinv @ Pi).max()
    return float(M * M * lam)
