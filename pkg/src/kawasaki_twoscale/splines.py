"""Periodic C^1 quadratic splines with M uniform pieces.

B-spline ``j`` (0-based) has its middle piece on ``[j/M, (j+1)/M)``; its left
and right pieces sit on the neighbouring intervals, indices taken modulo M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .piecewise import PiecewisePoly

# local coefficients (ascending powers of u) of the three B-spline pieces
RIGHT_TAIL = np.array([0.5, -1.0, 0.5])   # (1 - u)^2 / 2, spline j-1 seen on piece j
MIDDLE = np.array([0.5, 1.0, -1.0])       # 3/4 - (u - 1/2)^2
LEFT_TAIL = np.array([0.0, 0.0, 0.5])     # u^2 / 2, spline j+1 seen on piece j

GRAM_BANDS = (11.0 / 20.0, 13.0 / 60.0, 1.0 / 120.0)


def local_coefficients(c) -> np.ndarray:
    """Per-piece local coefficients ``(..., M, 3)`` of ``sum_j c_j B_j``."""
    c = np.asarray(c, dtype=float)
    prev = np.roll(c, 1, axis=-1)
    nxt = np.roll(c, -1, axis=-1)
    return prev[..., None] * RIGHT_TAIL + c[..., None] * MIDDLE + nxt[..., None] * LEFT_TAIL


def piece_coefficients(c) -> np.ndarray:
    """Global (alpha, beta, gamma) per piece with y = alpha t^2 + beta t + gamma."""
    loc = local_coefficients(c)
    M = loc.shape[-2]
    m = np.arange(M, dtype=float)
    a0, a1, a2 = loc[..., 0], loc[..., 1], loc[..., 2]
    alpha = a2 * M * M
    beta = a1 * M - 2.0 * a2 * M * m
    gamma = a0 - a1 * m + a2 * m * m
    return np.stack([alpha, beta, gamma], axis=-1)


def bspline_eval(M: int, j: int, theta):
    """Value of B_j (0-based index) at ``theta`` on the torus.

    Direct evaluation of the three-case formula, summed over periodic images
    so that small M (where the support wraps onto itself) is handled.
    """
    theta = np.mod(np.asarray(theta, dtype=float), 1.0)
    out = np.zeros_like(theta)
    for shift in range(-2, 3):
        t = theta + shift
        lo = (j - 1) / M
        out += np.where((t >= lo) & (t < j / M), 0.5 * M * M * (t - lo) ** 2, 0.0)
        mid = (2 * j + 1) / (2 * M)
        out += np.where((t >= j / M) & (t < (j + 1) / M), 0.75 - M * M * (t - mid) ** 2, 0.0)
        hi = (j + 2) / M
        out += np.where((t >= (j + 1) / M) & (t < hi), 0.5 * M * M * (t - hi) ** 2, 0.0)
    return out


def gram_matrix(M: int) -> np.ndarray:
    """Closed-form Gram matrix <B_j, B_k>_{L^2} on the torus.

    For M >= 5 the five bands never meet; for smaller M, bands that wrap onto
    the same index are accumulated, which is the exact Gram matrix of the
    periodised basis.
    """
    if M < 1:
        raise ValueError("M must be positive")
    G = np.zeros((M, M))
    idx = np.arange(M)
    for d in range(-2, 3):
        G[idx, (idx + d) % M] += GRAM_BANDS[abs(d)] / M
    return G


def gram_by_integration(M: int) -> np.ndarray:
    """Gram matrix by exact per-interval polynomial integration (cross-check)."""
    return _pairwise_inner(PiecewisePoly(local_coefficients(np.eye(M))))


def h1_stiffness(M: int) -> np.ndarray:
    """Matrix of <B_j', B_k'>_{L^2}."""
    return _pairwise_inner(PiecewisePoly(local_coefficients(np.eye(M))).derivative())


def _pairwise_inner(basis: PiecewisePoly) -> np.ndarray:
    a = PiecewisePoly(basis.coef[:, None])
    b = PiecewisePoly(basis.coef[None, :])
    return (a * b).integral()


@dataclass(frozen=True)
class SplineField:
    """Spline ``y = sum_j c_j B_j`` stored by its B-spline coefficients.

    ``coeffs`` may carry leading batch axes. Mean zero is equivalent to
    ``sum_j c_j = 0`` because every B_j integrates to 1/M.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def M(self) -> int:
        return self.coeffs.shape[-1]

    @classmethod
    def zeros(cls, M: int) -> "SplineField":
        return cls(np.zeros(M))

    def centered(self) -> "SplineField":
        return SplineField(self.coeffs - self.coeffs.mean(axis=-1, keepdims=True))

    @property
    def local_coeffs(self) -> np.ndarray:
        return local_coefficients(self.coeffs)

    @property
    def piece_coeffs(self) -> np.ndarray:
        return piece_coefficients(self.coeffs)

    def to_piecewise(self) -> PiecewisePoly:
        return PiecewisePoly(self.local_coeffs)

    def __call__(self, theta):
        return self.to_piecewise()(theta)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coeffs, dtype=dtype)

    def __add__(self, other):
        return SplineField(self.coeffs + np.asarray(other))

    def __sub__(self, other):
        return SplineField(self.coeffs - np.asarray(other))

    def __mul__(self, s):
        return SplineField(self.coeffs * s)

    __rmul__ = __mul__

    def __neg__(self):
        return SplineField(-self.coeffs)
