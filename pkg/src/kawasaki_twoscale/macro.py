"""Macroscopic layer: numerical Legendre transform and the nonlinear heat equation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, interpolate, optimize, special

from .core import ConfigurationError, SingleSitePotential, hermite_rule


class QuadratureResolutionError(RuntimeError):
    """Raised when the Legendre root solve fails, which points at too few quadrature nodes."""


# --- single-site log-partition function -------------------------------------------

def log_partition(pot: SingleSitePotential, sigma, n_nodes: int = 200):
    """Lambda(sigma) = log int exp(sigma x - psi(x)) dx and its first two derivatives.

    Completing the square, the tilted measure is N(sigma - a, 1) reweighted by
    exp(-dpsi), so a Hermite rule shifted to sigma - a does all the work.
    Returns ``(Lambda, Lambda', Lambda'')`` with the shape of ``sigma``.
    """
    sigma = np.asarray(sigma, dtype=float)
    u, w = hermite_rule(n_nodes)
    shift = sigma[..., None] - pot.a
    x = u + shift
    wt = w * np.exp(-pot.delta_eval(x)) if not pot.is_gaussian else np.broadcast_to(w, x.shape)
    Z = wt.sum(axis=-1)
    mean = (wt * x).sum(axis=-1) / Z
    var = (wt * (x - mean[..., None]) ** 2).sum(axis=-1) / Z
    lam = 0.5 * shift[..., 0] ** 2 + 0.5 * np.log(2 * np.pi) + np.log(Z)
    return lam, mean, var


def solve_sigma(pot: SingleSitePotential, m, n_nodes: int = 200, tol: float = 1e-13,
                max_iter: int = 100):
    """sigma* with Lambda'(sigma*) = m by Newton safeguarded with bisection (vectorised in m)."""
    m = np.asarray(m, dtype=float)

    def g(s):
        _, d1, d2 = log_partition(pot, s, n_nodes)
        return d1 - m, d2

    s = m + pot.a
    width = np.full(m.shape, 1.0 + 2.0 * pot.bounds[0])
    lo, hi = s - width, s + width
    for _ in range(60):
        bad = ~((g(lo)[0] < 0) & (g(hi)[0] > 0))
        if not bad.any():
            break
        lo, hi = np.where(bad, lo - width, lo), np.where(bad, hi + width, hi)
        width = np.where(bad, 2 * width, width)
    else:
        raise QuadratureResolutionError("could not bracket sigma")
    for _ in range(max_iter):
        r, d2 = g(s)
        done = np.abs(r) <= tol * (1 + np.abs(m))
        if done.all():
            return s if s.ndim else float(s)
        hi = np.where(r > 0, s, hi)
        lo = np.where(r <= 0, s, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d2 > 0, s - r / d2, np.nan)
        new = np.where((lo < step) & (step < hi), step, 0.5 * (lo + hi))
        s = np.where(done, s, new)
    raise QuadratureResolutionError("Legendre Newton iteration stalled; raise n_nodes")


# --- free-energy table ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FreeEnergyTable:
    """phi and its derivatives on a uniform m grid, with cubic Hermite interpolants.

    phi' is interpolated from (sigma*, phi'') so the interpolant matches both
    the slope and the curvature data at the nodes; ``lam_num`` and ``Lam_num``
    are the extremes of the interpolated phi'' on a dense grid.
    """

    m_grid: np.ndarray
    sigma_star: np.ndarray
    phi_nodes: np.ndarray
    phi_double_prime_nodes: np.ndarray
    lam_num: float
    Lam_num: float
    potential_name: str = ""
    _dphi: object = field(repr=False, default=None)
    _phi: object = field(repr=False, default=None)

    @property
    def phi_prime_nodes(self):
        return self.sigma_star

    @property
    def m_max(self) -> float:
        return float(self.m_grid[-1])

    def _check(self, m):
        m = np.asarray(m, dtype=float)
        if m.size and np.abs(m).max() > self.m_max * (1 + 1e-12):
            raise ConfigurationError(f"value {np.abs(m).max():.4g} outside the free-energy table "
                                     f"range [-{self.m_max}, {self.m_max}]")
        return m

    def phi(self, m):
        return self._phi(self._check(m))

    def phi_prime(self, m):
        return self._dphi(self._check(m))

    def phi_double_prime(self, m):
        return self._dphi(self._check(m), 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "phi", "phi_prime", "phi_double_prime"])
            for row in zip(self.m_grid, self.phi_nodes, self.sigma_star, self.phi_double_prime_nodes):
                w.writerow([repr(float(v)) for v in row])


def build_free_energy(pot: SingleSitePotential, m_max: float = 4.0, grid_size: int = 401,
                      n_nodes: int = 200, dense_factor: int = 10) -> FreeEnergyTable:
    """Tabulate phi(m) = sup_sigma (sigma m - Lambda(sigma)) on [-m_max, m_max]."""
    if grid_size < 3 or m_max <= 0:
        raise ConfigurationError("free-energy grid needs m_max > 0 and at least 3 nodes")
    m = np.linspace(-m_max, m_max, grid_size)
    sigma = solve_sigma(pot, m, n_nodes)
    lam, _, var = log_partition(pot, sigma, n_nodes)
    phi = sigma * m - lam
    d2 = 1.0 / var
    dphi = interpolate.CubicHermiteSpline(m, sigma, d2)
    phi_i = interpolate.CubicHermiteSpline(m, phi, sigma)
    dense = np.linspace(-m_max, m_max, dense_factor * (grid_size - 1) + 1)
    curv = dphi(dense, 1)
    return FreeEnergyTable(m, sigma, phi, d2, float(curv.min()), float(curv.max()),
                           pot.name, dphi, phi_i)


def legendre_grid_search(pot: SingleSitePotential, m_values, x_half_width: float = 30.0,
                         n_x: int = 60001, sigma_step: float = 1e-2, sigma_half_width: float = 3.0):
    """Brute-force phi(m): dense trapezoid Lambda, sigma grid search, bounded refinement."""
    x = np.linspace(-x_half_width, x_half_width, n_x)
    dx = x[1] - x[0]
    wtrap = np.full(n_x, dx)
    wtrap[[0, -1]] *= 0.5
    logw = np.log(wtrap) - pot(x, 0)

    def Lam(s):
        return special.logsumexp(s * x + logw)

    out = []
    for m in np.atleast_1d(m_values):
        grid = np.arange(m + pot.a - sigma_half_width, m + pot.a + sigma_half_width, sigma_step)
        vals = np.array([s * m - Lam(s) for s in grid])
        k = int(np.argmax(vals))
        res = optimize.minimize_scalar(lambda s: -(s * m - Lam(s)), bounds=(grid[max(k - 1, 0)],
                                       grid[min(k + 1, len(grid) - 1)]), method="bounded",
                                       options={"xatol": 1e-12})
        out.append(max(-res.fun, vals[k]))
    return np.array(out)


# --- macroscopic field and solver ---------------------------------------------------

@dataclass(frozen=True)
class MacroField:
    """Cell values of zeta at the centres (i + 1/2)/G of a uniform periodic grid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v = v - v.mean(axis=-1, keepdims=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def G(self) -> int:
        return self.values.shape[-1]

    @staticmethod
    def centers(G: int) -> np.ndarray:
        return (np.arange(G) + 0.5) / G

    @classmethod
    def from_function(cls, fn, G: int) -> "MacroField":
        return cls(fn(cls.centers(G)))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def laplacian_h(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    G = v.shape[-1]
    return G * G * (np.roll(v, -1, axis=-1) - 2.0 * v + np.roll(v, 1, axis=-1))


def h1_seminorm_h_sq(v) -> np.ndarray:
    """Discrete |v|_{H^1}^2 = sum_i ((v_{i+1} - v_i) G)^2 / G."""
    v = np.asarray(v, dtype=float)
    G = v.shape[-1]
    return G * np.sum((np.roll(v, -1, axis=-1) - v) ** 2, axis=-1)


def explicit_dt_cap(table: FreeEnergyTable, G: int) -> float:
    return 1.0 / (2.0 * G * G * table.Lam_num)


def macro_step(table: FreeEnergyTable, zeta, dt: float, mode: str = "explicit") -> MacroField:
    """One step of d zeta/dt = Delta_h phi'(zeta).

    ``explicit``: zeta + dt Delta_h phi'(zeta), requires dt <= h^2 / (2 Lam_num).
    ``semi_implicit``: (I - dt L Delta_h) zeta_new = zeta + dt Delta_h (phi'(zeta) - L zeta)
    with L = Lam_num, solved by FFT; no step cap.
    """
    z = np.asarray(getattr(zeta, "values", zeta), dtype=float)
    G = z.shape[-1]
    if mode == "explicit":
        cap = explicit_dt_cap(table, G)
        if dt > cap * (1 + 1e-12):
            raise ConfigurationError(f"explicit macro step dt={dt:.3g} exceeds cap {cap:.3g}")
        return MacroField(z + dt * laplacian_h(table.phi_prime(z)))
    if mode == "semi_implicit":
        L = table.Lam_num
        rhs = z + dt * laplacian_h(table.phi_prime(z) - L * z)
        k = np.fft.rfftfreq(G, 1.0 / G)
        symbol = 4.0 * G * G * np.sin(np.pi * k / G) ** 2
        return MacroField(np.fft.irfft(np.fft.rfft(rhs) / (1.0 + dt * L * symbol), n=G))
    raise ConfigurationError(f"unknown macro step mode {mode!r}")


def macro_solve(table: FreeEnergyTable, zeta0, T: float, dt: float | None = None, mode: str = "explicit",
                n_intervals: int = 20, cfl: float = 0.9, record_all: bool = False):
    """Integrate to T; returns ``(times, values, dt)``.

    Snapshots fall on ``n_intervals + 1`` uniform times (every step with
    ``record_all``). The default step is ``cfl`` times the explicit cap,
    shortened so that it divides the snapshot spacing.
    """
    z = MacroField(getattr(zeta0, "values", zeta0))
    G = z.G
    dt_max = cfl * explicit_dt_cap(table, G) if dt is None else dt
    per = max(1, int(np.ceil(T / n_intervals / dt_max - 1e-9)))
    dt = T / (n_intervals * per)
    vals = [z.values]
    for k in range(n_intervals * per):
        z = macro_step(table, z, dt, mode)
        if record_all or (k + 1) % per == 0:
            vals.append(z.values)
    n = len(vals)
    return np.linspace(0.0, T, n), np.array(vals), dt


def macro_energy(table: FreeEnergyTable, zeta) -> np.ndarray:
    """Periodic trapezoid value of int phi(zeta) d theta."""
    z = np.asarray(getattr(zeta, "values", zeta), dtype=float)
    return np.mean(table.phi(z), axis=-1)


def macro_energy_decay_check(table: FreeEnergyTable, values, dt: float, rtol: float = 1e-8,
                             match_tol: float = 0.1) -> dict:
    """Energy monotonicity and the discrete dissipation identity along a step-by-step trajectory."""
    values = np.asarray(values, dtype=float)
    E = macro_energy(table, values)
    inc = np.diff(E)
    monotone = bool(np.all(inc <= rtol * (1 + np.abs(E[:-1]))))
    pred = dt * h1_seminorm_h_sq(table.phi_prime(values[:-1]))
    active = pred > 1e-14 * (1 + np.abs(E[:-1]))
    rel = np.abs(-inc[active] - pred[active]) / pred[active] if active.any() else np.zeros(1)
    return {
        "monotone": monotone,
        "max_increase": float(inc.max()) if inc.size else 0.0,
        "dissipation_rel_mismatch": float(rel.max()),
        "dissipation_ok": bool(rel.max() <= match_tol),
        "passed": monotone and bool(rel.max() <= match_tol),
    }


def macro_bounds_check(table: FreeEnergyTable, times, values) -> dict:
    """L^2 sup bound and time-integrated H^1 bounds of the energy estimates."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    l2 = np.mean(values ** 2, axis=-1)
    sup_ratio = float(l2.max() / l2[0]) if l2[0] > 0 else 0.0
    bound = table.Lam_num / table.lam_num
    phi_h1 = h1_seminorm_h_sq(table.phi_prime(values))
    zeta_h1 = h1_seminorm_h_sq(values)
    int_phi = float(integrate.trapezoid(phi_h1, times))
    int_zeta = float(integrate.trapezoid(zeta_h1, times))
    scale = l2[0] if l2[0] > 0 else 1.0
    sup_ok = sup_ratio <= bound * (1 + 1e-9)
    chain_ok = int_zeta <= int_phi / table.lam_num ** 2 * (1 + 1e-9) + 1e-300
    return {
        "sup_ratio": sup_ratio,
        "sup_bound": bound,
        "int_phi_prime_h1": int_phi,
        "int_zeta_h1": int_zeta,
        "c_phi": float(int_phi / scale),
        "c_zeta": float(int_zeta / scale),
        "sup_ok": bool(sup_ok),
        "chain_ok": bool(chain_ok),
        "passed": bool(sup_ok and chain_ok),
    }
