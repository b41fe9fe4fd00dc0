"""Domain types: lattice configurations, single-site potentials, grid geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special


class ConfigurationError(ValueError):
    """Raised for invalid experiment or model configuration."""


class AssemblyError(RuntimeError):
    """Raised when operator assembly detects a broken invariant."""


class ConditioningError(AssemblyError):
    """Raised when PNP^t is too poorly conditioned to invert reliably."""


@dataclass(frozen=True)
class MultiscaleGrid:
    """Lattice size ``N``, spline piece count ``M`` and block size ``K = N / M``.

    ``K_min`` is the smallest block size accepted for operator assembly; the
    conditioning of PNP^t is checked numerically on top of it.
    """

    N: int
    M: int
    K_min: int = 4

    def __post_init__(self):
        if self.N <= 0 or self.M <= 0:
            raise ConfigurationError(f"N and M must be positive, got N={self.N}, M={self.M}")
        if self.N % self.M:
            raise ConfigurationError(f"N={self.N} is not a multiple of M={self.M}")
        if self.K < self.K_min:
            raise ConfigurationError(
                f"block size K={self.K} is below K_min={self.K_min} (N={self.N}, M={self.M})"
            )

    @property
    def K(self) -> int:
        return self.N // self.M

    @classmethod
    def from_blocks(cls, M: int, K: int, K_min: int = 4) -> "MultiscaleGrid":
        return cls(N=M * K, M=M, K_min=K_min)


def center(values) -> np.ndarray:
    """Subtract the mean along the last axis."""
    values = np.asarray(values, dtype=float)
    return values - values.mean(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SpinConfiguration:
    """A point of the mean-zero hyperplane X_N.

    The constructor re-centres its input rather than rejecting it, so that
    floating-point drift never leaves the hyperplane.
    """

    values: np.ndarray

    def __post_init__(self):
        v = center(self.values)
        if v.ndim != 1:
            raise ValueError("SpinConfiguration holds a single length-N vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.N


def step_function_view(x, theta):
    """Evaluate the step function of ``x`` at ``theta`` (periodic, left-closed cells)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    theta = np.mod(np.asarray(theta, dtype=float), 1.0)
    idx = np.minimum(np.floor(theta * n).astype(int), n - 1)
    return x[..., idx]


@dataclass(frozen=True)
class SingleSitePotential:
    """psi(x) = x^2/2 + a x + dpsi(x) with bounded dpsi and dpsi''.

    Parameters
    ----------
    a : float
        Linear tilt.
    delta : callable or None
        Perturbation returning dpsi(x); ``None`` means dpsi == 0.
    delta_prime, delta_second : callable or None
        First and second derivatives of the perturbation.
    bounds : (float, float)
        Declared sup-norm bounds of dpsi and dpsi''. Evaluations that exceed
        them raise ``ConfigurationError``.
    name : str
        Library name, kept for reports.
    params : dict
        Library parameters, kept for reports.
    """

    a: float = 0.0
    delta: Callable | None = None
    delta_prime: Callable | None = None
    delta_second: Callable | None = None
    bounds: tuple = (0.0, 0.0)
    name: str = "gaussian"
    params: dict = field(default_factory=dict)

    @property
    def is_gaussian(self) -> bool:
        return self.delta is None

    @property
    def stiffness(self) -> float:
        """Upper bound of psi'' used in step-size caps."""
        return 1.0 + self.bounds[1]

    def _checked(self, fn, x, bound):
        v = fn(x)
        if np.any(np.abs(v) > bound * (1 + 1e-12) + 1e-300):
            raise ConfigurationError(f"perturbation of {self.name!r} exceeds its declared bound {bound}")
        return v

    def delta_eval(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        if self.delta is None:
            return np.zeros_like(x)
        if order == 0:
            return self._checked(self.delta, x, self.bounds[0])
        if order == 1:
            return self.delta_prime(x)
        return self._checked(self.delta_second, x, self.bounds[1])

    def __call__(self, x, order: int = 0):
        return psi_eval(self, x, order)


def psi_eval(pot: SingleSitePotential, x, order: int = 0):
    """Value (``order=0``), slope (1) or curvature (2) of the potential."""
    x = np.asarray(x, dtype=float)
    if order == 0:
        return 0.5 * x * x + pot.a * x + pot.delta_eval(x, 0)
    if order == 1:
        return x + pot.a + pot.delta_eval(x, 1)
    if order == 2:
        return 1.0 + pot.delta_eval(x, 2)
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


def hermite_rule(n: int = 200):
    """Probabilists' Gauss-Hermite nodes and weights normalised to a probability."""
    nodes, weights = special.roots_hermitenorm(n)   # numpy's hermegauss overflows past ~300 nodes
    return nodes, weights / weights.sum()


def tilt_mean(delta: Callable | None, a: float, n_nodes: int = 200) -> float:
    """Mean of exp(-psi)/Z for psi = x^2/2 + a x + delta(x).

    Completing the square turns the Gaussian factor into N(-a, 1), so the
    quadrature runs on a standard Hermite rule shifted by ``-a``.
    """
    u, w = hermite_rule(n_nodes)
    x = u - a
    g = w if delta is None else w * np.exp(-delta(x))
    return float(np.dot(g, x) / g.sum())


def normalize_tilt(delta=None, delta_prime=None, delta_second=None, bounds=(0.0, 0.0),
                   n_nodes: int = 200, name: str = "custom", params=None,
                   max_iter: int = 200) -> SingleSitePotential:
    """Choose the tilt ``a`` so that exp(-psi) has mean zero.

    The mean is strictly decreasing in ``a``, so a bracketed Brent solve is
    enough; the bracket is widened until it changes sign.
    """
    params = dict(params or {})
    if delta is None:
        return SingleSitePotential(a=0.0, name="gaussian" if name == "custom" else name, params=params)

    def f(a):
        return tilt_mean(delta, a, n_nodes)

    width = 2.0 * bounds[0] + 1.0
    for _ in range(20):
        if f(-width) > 0 > f(width):
            break
        width *= 2.0
    else:
        raise ConfigurationError("could not bracket the tilt root")
    try:
        a, info = optimize.brentq(f, -width, width, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                                  maxiter=max_iter, full_output=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"tilt root-finder did not converge: {exc}") from exc
    if not info.converged:
        raise ConfigurationError("tilt root-finder did not converge")
    return SingleSitePotential(a=float(a), delta=delta, delta_prime=delta_prime,
                               delta_second=delta_second, bounds=tuple(bounds),
                               name=name, params=params)


def gaussian_potential() -> SingleSitePotential:
    return normalize_tilt(None, name="gaussian")


def cosine_potential(beta: float = 0.5, omega: float = 1.0, phase: float = 0.0,
                     n_nodes: int = 200) -> SingleSitePotential:
    """Tilt-normalised potential with dpsi(x) = beta cos(omega x + phase)."""
    beta, omega, phase = float(beta), float(omega), float(phase)

    def delta(x):
        return beta * np.cos(omega * x + phase)

    def delta_prime(x):
        return -beta * omega * np.sin(omega * x + phase)

    def delta_second(x):
        return -beta * omega ** 2 * np.cos(omega * x + phase)

    bounds = (abs(beta), abs(beta) * omega ** 2)
    return normalize_tilt(delta, delta_prime, delta_second, bounds=bounds, n_nodes=n_nodes,
                          name="cosine", params={"beta": beta, "omega": omega, "phase": phase})


POTENTIALS = {
    "gaussian": gaussian_potential,
    "cosine": cosine_potential,
}


def make_potential(spec) -> SingleSitePotential:
    """Build a potential from ``{"name": ..., **params}`` or a bare name."""
    if isinstance(spec, SingleSitePotential):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", "gaussian")
    params = spec.pop("params", {})
    params.update(spec)
    try:
        factory = POTENTIALS[name]
    except KeyError:
        raise ConfigurationError(f"unknown potential {name!r}; choose from {sorted(POTENTIALS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for potential {name!r}: {exc}") from exc
