"""Exact algebra for piecewise polynomials on uniform periodic meshes of [0, 1).

A function is stored as an array ``coef`` of shape ``(..., n, d + 1)``: on
piece ``m`` (the interval ``[m/n, (m+1)/n)``) it equals
``sum_p coef[..., m, p] * u**p`` with the local variable ``u = n*theta - m``.
Leading axes are batch axes, so an ensemble of step functions is one object.
All integrals are evaluated in closed form.
"""

from __future__ import annotations

from math import comb, gcd

import numpy as np


def _lcm(a: int, b: int) -> int:
    return a * b // gcd(a, b)


def _refine_matrices(r: int, degree: int) -> np.ndarray:
    # T[k, p, q]: coefficient of s**q in ((s + k) / r)**p
    T = np.zeros((r, degree + 1, degree + 1))
    for k in range(r):
        for p in range(degree + 1):
            for q in range(p + 1):
                T[k, p, q] = comb(p, q) * float(k) ** (p - q) / float(r) ** p
    return T


class PiecewisePoly:
    """Piecewise polynomial on a uniform periodic mesh, possibly batched."""

    __array_priority__ = 1000

    def __init__(self, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.ndim < 2:
            raise ValueError("coef must have shape (..., n_pieces, degree + 1)")
        self.coef = coef

    # construction -----------------------------------------------------
    @classmethod
    def step(cls, values) -> "PiecewisePoly":
        """Step function taking ``values[..., i]`` on cell ``i``."""
        values = np.asarray(values, dtype=float)
        return cls(values[..., None])

    @classmethod
    def from_function(cls, fn, n_pieces: int, degree: int = 8) -> "PiecewisePoly":
        """Local Chebyshev interpolation of a smooth callable (reference solutions only)."""
        k = np.arange(degree + 1)
        u = 0.5 - 0.5 * np.cos(np.pi * (2 * k + 1) / (2 * degree + 2))
        theta = (np.arange(n_pieces)[:, None] + u[None, :]) / n_pieces
        vals = np.asarray(fn(theta), dtype=float)
        V = np.vander(u, degree + 1, increasing=True)
        coef = np.linalg.solve(V, vals.reshape(-1, degree + 1).T).T
        return cls(coef.reshape(vals.shape[:-2] + (n_pieces, degree + 1)))

    # shape ------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.coef.shape[-2]

    @property
    def degree(self) -> int:
        return self.coef.shape[-1] - 1

    @property
    def batch_shape(self):
        return self.coef.shape[:-2]

    def with_degree(self, degree: int) -> "PiecewisePoly":
        if degree < self.degree:
            raise ValueError("cannot lower the degree")
        pad = [(0, 0)] * (self.coef.ndim - 1) + [(0, degree - self.degree)]
        return PiecewisePoly(np.pad(self.coef, pad))

    def refine(self, n_new: int) -> "PiecewisePoly":
        """Re-express on a mesh of ``n_new`` pieces (``n_new`` a multiple of ``n``)."""
        if n_new == self.n:
            return self
        if n_new % self.n:
            raise ValueError(f"mesh {n_new} does not refine mesh {self.n}")
        r = n_new // self.n
        if self.degree == 0:
            return PiecewisePoly(np.repeat(self.coef, r, axis=-2))
        T = _refine_matrices(r, self.degree)
        out = np.einsum("...mp,kpq->...mkq", self.coef, T)
        return PiecewisePoly(out.reshape(self.batch_shape + (n_new, self.degree + 1)))

    @staticmethod
    def common(a: "PiecewisePoly", b: "PiecewisePoly"):
        n = _lcm(a.n, b.n)
        d = max(a.degree, b.degree)
        return a.refine(n).with_degree(d), b.refine(n).with_degree(d)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, PiecewisePoly):
            other = np.asarray(other, dtype=float)
            c = np.array(np.broadcast_to(self.coef, np.broadcast_shapes(
                self.coef.shape, other.shape + self.coef.shape[-2:])))
            c[..., 0] += other[..., None]
            return PiecewisePoly(c)
        a, b = PiecewisePoly.common(self, other)
        return PiecewisePoly(a.coef + b.coef)

    __radd__ = __add__

    def __neg__(self):
        return PiecewisePoly(-self.coef)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, PiecewisePoly):
            other = np.asarray(other, dtype=float)
            return PiecewisePoly(self.coef * other[..., None, None])
        a, b = PiecewisePoly.common(self, other)
        da, db = self.degree, other.degree
        a = PiecewisePoly(a.coef[..., : da + 1]) if a.degree > da else a
        b = PiecewisePoly(b.coef[..., : db + 1]) if b.degree > db else b
        shape = np.broadcast_shapes(a.coef.shape[:-1], b.coef.shape[:-1])
        out = np.zeros(shape + (a.degree + b.degree + 1,))
        for i in range(a.degree + 1):
            out[..., i: i + b.degree + 1] += a.coef[..., i: i + 1] * b.coef
        return PiecewisePoly(out)

    __rmul__ = __mul__

    # calculus ---------------------------------------------------------
    def piece_integrals(self) -> np.ndarray:
        p = np.arange(self.degree + 1)
        return (self.coef @ (1.0 / (p + 1))) / self.n

    def integral(self) -> np.ndarray:
        return self.piece_integrals().sum(axis=-1)

    def mean(self) -> np.ndarray:
        return self.integral()

    def derivative(self) -> "PiecewisePoly":
        if self.degree == 0:
            return PiecewisePoly(np.zeros_like(self.coef))
        p = np.arange(1, self.degree + 1)
        return PiecewisePoly(self.coef[..., 1:] * p * self.n)

    def antiderivative(self, rtol: float = 1e-10) -> "PiecewisePoly":
        """Periodic, mean-zero antiderivative.

        Raises ``ValueError`` when the function does not integrate to zero,
        because then no periodic antiderivative exists.
        """
        pieces = self.piece_integrals()
        total = pieces.sum(axis=-1)
        scale = np.abs(pieces).sum(axis=-1) + np.sqrt(self.norm_sq_l2())
        if np.any(np.abs(total) > rtol * np.maximum(scale, 1e-300) + 1e-14):
            raise ValueError("function is not mean-zero; H^-1 antiderivative is not periodic")
        p = np.arange(self.degree + 1)
        body = self.coef / (p + 1) / self.n
        start = np.cumsum(pieces, axis=-1) - pieces
        coef = np.concatenate([start[..., None], body], axis=-1)
        W = PiecewisePoly(coef)
        return W - W.mean()

    # evaluation and norms ---------------------------------------------
    def __call__(self, theta):
        theta = np.mod(np.asarray(theta, dtype=float), 1.0)
        pos = theta * self.n
        m = np.minimum(np.floor(pos).astype(int), self.n - 1)
        u = pos - m
        c = self.coef[..., m, :]
        return np.polynomial.polynomial.polyval(u, np.moveaxis(c, -1, 0), tensor=False)

    def inner(self, other: "PiecewisePoly") -> np.ndarray:
        return (self * other).integral()

    def norm_sq_l2(self) -> np.ndarray:
        return (self * self).integral()

    def l2(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.norm_sq_l2(), 0.0))
