"""Exact L^2, H^1, H^-1 and Abar-weighted norms of step functions and splines.

Everything is reduced to piecewise-polynomial integrals, so the only error is
floating-point rounding.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .operators import OperatorCache, apply_A, mean_zero_basis, solve_abar
from .piecewise import PiecewisePoly
from .splines import SplineField, gram_matrix, h1_stiffness, local_coefficients


class UnsupportedInputError(TypeError):
    """Raised when a norm is requested for an input type that has no such norm."""


class MeanZeroError(ValueError):
    """Raised when an H^-1 norm is requested for a function with nonzero mean."""


def as_piecewise(f) -> PiecewisePoly:
    """Piecewise-polynomial view of a lattice vector, spline or macro field."""
    if isinstance(f, PiecewisePoly):
        return f
    if isinstance(f, SplineField):
        return f.to_piecewise()
    values = getattr(f, "values", f)
    return PiecewisePoly.step(np.asarray(values, dtype=float))


def l2_norm(f) -> np.ndarray:
    """Exact L^2(T) norm; for a lattice vector this is sqrt(mean(x**2))."""
    return as_piecewise(f).l2()


def l2_inner(f, g) -> np.ndarray:
    return as_piecewise(f).inner(as_piecewise(g))


def h1_seminorm(f) -> np.ndarray:
    """|f'|_{L^2} for a spline (or any continuous piecewise polynomial)."""
    if isinstance(f, SplineField):
        return f.to_piecewise().derivative().l2()
    if isinstance(f, PiecewisePoly) and f.degree >= 1:
        return f.derivative().l2()
    raise UnsupportedInputError("step functions have no H^1 seminorm; use dirichlet_form")


def hneg1_norm(f, rtol: float = 1e-10) -> np.ndarray:
    """L^2 norm of the mean-zero periodic antiderivative of ``f``.

    Raises ``MeanZeroError`` if ``f`` does not integrate to zero.
    """
    try:
        w = as_piecewise(f).antiderivative(rtol)
    except ValueError as exc:
        raise MeanZeroError(str(exc)) from None
    return w.l2()


def dirichlet_form(x) -> np.ndarray:
    """x.Ax = N^2 sum_n (x_n - x_{n-1})^2 on the periodic lattice."""
    x = np.asarray(getattr(x, "values", x), dtype=float)
    N = x.shape[-1]
    return N * N * np.sum((x - np.roll(x, 1, axis=-1)) ** 2, axis=-1)


def abar_norm(cache: OperatorCache, y, sign: int = 1) -> np.ndarray:
    """sqrt(<y, Abar^{sign} y>_{L^2}) for mean-zero splines ``y``."""
    c = np.asarray(getattr(y, "coeffs", y), dtype=float)
    if sign == 1:
        q = np.einsum("...i,ij,...j->...", c, cache.stiffness, c)
    elif sign == -1:
        u = solve_abar(cache, c)
        q = np.einsum("...i,ij,...j->...", c, cache.gram, u)
    else:
        raise ValueError("sign must be +1 or -1")
    return np.sqrt(np.maximum(q, 0.0))


# --- exact constants -----------------------------------------------------

def hneg1_gram(M: int) -> tuple[np.ndarray, np.ndarray]:
    """(Z, W): orthonormal mean-zero coefficient basis Z and the H^-1 Gram matrix W in it."""
    Z = mean_zero_basis(M)
    anti = PiecewisePoly(local_coefficients(Z.T)).antiderivative()
    a = PiecewisePoly(anti.coef[:, None])
    b = PiecewisePoly(anti.coef[None, :])
    W = (a * b).integral()
    return Z, 0.5 * (W + W.T)


def _extreme_ratios(num, den) -> tuple[float, float]:
    lam = linalg.eigh(num, den, eigvals_only=True)
    return float(np.sqrt(lam.min())), float(np.sqrt(lam.max()))


def norm_equivalence_extremes(cache: OperatorCache) -> dict:
    """Exact min/max over mean-zero splines of |y|_Abar/|y|_{H^1} and |y|_{Abar^-1}/|y|_{H^-1}."""
    Z, W = hneg1_gram(cache.M)
    H1 = Z.T @ h1_stiffness(cache.M) @ Z
    S = Z.T @ cache.stiffness @ Z
    GZ = cache.gram @ Z
    inv = GZ.T @ solve_abar(cache, Z.T).T
    inv = 0.5 * (inv + inv.T)
    return {
        "abar_over_h1": _extreme_ratios(S, H1),
        "abar_inv_over_hneg1": _extreme_ratios(inv, W),
    }


def discrete_poincare_constant(N: int) -> float:
    """Smallest C with sum x^2 <= C N^2 sum_{n=2}^N (x_n - x_{n-1})^2 on mean-zero x.

    The difference sum is the open-chain one, so the relevant eigenvalue is the
    first nonzero one of the path-graph Laplacian, 4 sin^2(pi / (2N)).
    """
    return float(1.0 / (4.0 * N * N * np.sin(np.pi / (2 * N)) ** 2))


def discrete_poincare_measured(N: int) -> float:
    """Same constant from a dense eigen-solve (independent of the closed form)."""
    D = np.diff(np.eye(N), axis=0)
    lam = np.linalg.eigvalsh(D.T @ D)
    return float(1.0 / (N * N * lam[1]))


def inverse_sobolev_constant(M: int) -> float:
    """Smallest c with |y|_{H^1} <= c M |y|_{L^2} on mean-zero splines."""
    Z = mean_zero_basis(M)
    lam = linalg.eigh(Z.T @ h1_stiffness(M) @ Z, Z.T @ gram_matrix(M) @ Z, eigvals_only=True)
    return float(np.sqrt(lam.max()) / M)


class NormWorkspace:
    """Binds the norm functions to one operator cache and memoises the H^-1 Gram."""

    def __init__(self, cache: OperatorCache):
        self.cache = cache
        self._Z, self._W = hneg1_gram(cache.M)

    def hneg1_spline(self, y) -> np.ndarray:
        """H^-1 norm of a mean-zero spline via the cached Gram matrix."""
        c = np.asarray(getattr(y, "coeffs", y), dtype=float)
        a = c @ self._Z
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", a, self._W, a), 0.0))

    def abar(self, y, sign=1):
        return abar_norm(self.cache, y, sign)

    def dirichlet(self, x):
        return dirichlet_form(x)

    def check_dirichlet(self, x) -> float:
        """Relative gap between the difference-sum and x.Ax forms."""
        x = np.asarray(x, dtype=float)
        a = dirichlet_form(x)
        b = np.sum(x * apply_A(x), axis=-1)
        return float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300)))
