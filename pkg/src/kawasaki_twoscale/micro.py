"""Microscopic layer: Hamiltonian, Kawasaki SDE, Gibbs and fiber samplers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ConfigurationError, MultiscaleGrid, SingleSitePotential, center, hermite_rule
from .operators import OperatorCache, apply_A, fiber_decompose, fiber_foot, project_lattice

NOISE_CHUNK = 64   # time steps of noise drawn per generator call; fixed for reproducibility


class DivergenceError(FloatingPointError):
    """Raised when the SDE state becomes non-finite."""


class SamplerError(RuntimeError):
    """Raised when a sampler is misconfigured (e.g. rejection acceptance too low)."""


class FiberDriftError(RuntimeError):
    """Raised when a fiber chain leaves its fiber, which indicates a projector bug."""


# --- Hamiltonian ------------------------------------------------------------

def hamiltonian(pot: SingleSitePotential, x) -> np.ndarray:
    """H(x) = sum_i psi(x_i) along the last axis."""
    return np.sum(pot(x, 0), axis=-1)


def grad_hamiltonian(pot: SingleSitePotential, x) -> np.ndarray:
    return pot(x, 1)


# --- Kawasaki SDE -----------------------------------------------------------

def difference_adjoint(xi, N: int | None = None) -> np.ndarray:
    """D^T xi for the scaled backward difference (Dx)_i = N (x_i - x_{i-1}).

    D^T D = A, so sqrt(2 dt) D^T xi has the covariance of the Kawasaki noise
    increment, and its entries always sum to zero.
    """
    xi = np.asarray(xi, dtype=float)
    N = xi.shape[-1] if N is None else N
    return N * (xi - np.roll(xi, -1, axis=-1))


def max_stable_dt(pot: SingleSitePotential, N: int, factor: float = 0.5) -> float:
    """Explicit Euler-Maruyama step cap factor / (4 N^2 (1 + |dpsi''|_inf))."""
    return factor / (4.0 * N * N * pot.stiffness)


@dataclass(frozen=True)
class KawasakiState:
    """Ensemble state ``x[..., N]`` at macroscopic time ``t`` after ``step`` steps."""

    x: np.ndarray
    t: float = 0.0
    step: int = 0

    def __post_init__(self):
        x = center(self.x)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class EnsembleSpec:
    """Realization count, step size, base seed and named initial law.

    ``initializer`` is ``"equilibrium"`` (draws from the Gibbs measure) or
    ``"tilted"`` (Gibbs draw plus the lattice lift of a profile).
    """

    R: int
    dt: float
    seed: int = 0
    initializer: str = "equilibrium"
    stability_factor: float = 0.5

    def validate(self, pot: SingleSitePotential, N: int) -> None:
        if self.R < 1:
            raise ConfigurationError("realization count R must be positive")
        if self.initializer not in ("equilibrium", "tilted"):
            raise ConfigurationError(f"unknown initializer {self.initializer!r}")
        cap = max_stable_dt(pot, N, self.stability_factor)
        if not 0 < self.dt <= cap * (1 + 1e-12):
            raise ConfigurationError(f"dt={self.dt:.3g} violates the stability cap {cap:.3g} at N={N}")


def kawasaki_step(pot: SingleSitePotential, grid: MultiscaleGrid, state: KawasakiState, dt: float,
                  xi=None) -> KawasakiState:
    """One Euler-Maruyama step X <- X - A grad H(X) dt + sqrt(2 dt) D^T xi.

    ``xi`` is the standard normal increment (same shape as ``state.x``); pass
    zeros for the noiseless flow. The result is re-centred.
    """
    x = state.x
    N = grid.N
    drift = apply_A(grad_hamiltonian(pot, x), N)
    new = x - dt * drift
    if xi is not None:
        new = new + np.sqrt(2.0 * dt) * difference_adjoint(xi, N)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite state at step {state.step + 1} (t={state.t + dt:.6g})")
    return KawasakiState(new, state.t + dt, state.step + 1)


def realization_rngs(seed: int, R: int, stream: int = 0) -> list:
    """One independent generator per realization, keyed by (seed, stream, r)."""
    return [np.random.default_rng(np.random.SeedSequence([seed, stream, r])) for r in range(R)]


def snapshot_schedule(T: float, dt_max: float, n_intervals: int = 20):
    """Step size and step counts putting ``n_intervals + 1`` snapshots on [0, T] exactly."""
    per = max(1, int(np.ceil(T / n_intervals / dt_max - 1e-9)))
    dt = T / (n_intervals * per)
    return dt, per, np.linspace(0.0, T, n_intervals + 1)


def simulate_ensemble(pot: SingleSitePotential, grid: MultiscaleGrid, x0, T: float, dt_max: float,
                      seed: int = 0, stream: int = 0, n_intervals: int = 20, noise: bool = True,
                      threads: int = 1, observe=None):
    """Run R independent Kawasaki chains and record ``n_intervals + 1`` snapshots.

    Parameters
    ----------
    x0 : array (R, N)
        Initial configurations.
    dt_max : float
        Largest admissible step; the actual step divides the snapshot spacing.
    seed, stream : int
        Realization ``r`` draws from the stream keyed by ``(seed, stream, r)``
        in chunks of ``NOISE_CHUNK`` steps, so results do not depend on
        ``threads``.
    observe : callable, optional
        Applied to each snapshot ``(R, N)``; its outputs are stacked instead
        of the raw states.

    Returns
    -------
    times : ndarray (S,)
    snaps : ndarray (S, ...)
    dt : float
    """
    x0 = center(np.atleast_2d(x0))
    R, N = x0.shape
    if N != grid.N:
        raise ConfigurationError(f"initial state has length {N}, grid has N={grid.N}")
    dt, per, times = snapshot_schedule(T, dt_max, n_intervals)
    if dt > max_stable_dt(pot, N, 1.0):
        raise ConfigurationError("dt_max exceeds the explicit stability limit")
    rngs = realization_rngs(seed, R, stream)
    observe = observe or (lambda s: s.copy())

    def run_block(lo, hi):
        state = KawasakiState(x0[lo:hi])
        out = [state.x.copy()]
        buf, used = None, NOISE_CHUNK
        for k in range(n_intervals * per):
            if noise:
                if used == NOISE_CHUNK:
                    buf = np.stack([rngs[r].standard_normal((NOISE_CHUNK, N)) for r in range(lo, hi)], axis=1)
                    used = 0
                xi = buf[used]
                used += 1
            else:
                xi = None
            state = kawasaki_step(pot, grid, state, dt, xi)
            if (k + 1) % per == 0:
                out.append(state.x.copy())
        return np.stack(out)

    threads = max(1, min(int(threads), R))
    if threads == 1:
        traj = run_block(0, R)
    else:
        edges = np.linspace(0, R, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda ab: run_block(*ab), zip(edges[:-1], edges[1:])))
        traj = np.concatenate(parts, axis=1)
    snaps = np.stack([observe(s) for s in traj])
    return times, snaps, dt


def mode_decay_factor(N: int, k: int, dt: float) -> float:
    """Noiseless Gaussian-case amplitude ratio of Fourier mode k over one step."""
    return 1.0 - 4.0 * N * N * np.sin(np.pi * k / N) ** 2 * dt


def em_stationary_variance(N: int, dt: float) -> np.ndarray:
    """Per-site stationary variance of the Gaussian Euler-Maruyama chain.

    Mode k (eigenvalue a_k of A) has variance 1 / (1 - a_k dt / 2) instead of
    the exact 1; averaging over the N - 1 nonconstant modes gives the site
    variance, which tends to 1 - 1/N as dt -> 0.
    """
    k = np.arange(1, N)
    a = 4.0 * N * N * np.sin(np.pi * k / N) ** 2
    return float(np.sum(1.0 / (1.0 - 0.5 * a * dt)) / N)


# --- samplers ---------------------------------------------------------------

class GibbsDraw(NamedTuple):
    x: np.ndarray
    exact: bool
    acceptance: float


def sample_gibbs(pot: SingleSitePotential, N: int, rng, size=None, min_acceptance: float = 1e-3) -> GibbsDraw:
    """Draw configurations from the canonical ensemble on X_N.

    Gaussian potentials are sampled exactly by projecting an i.i.d. standard
    normal vector. Otherwise i.i.d. single-site draws from exp(-psi) (rejection
    from N(-a, 1) with acceptance exp(-dpsi - |dpsi|_inf)) are projected, which
    is approximate and flagged so.
    """
    shape = (N,) if size is None else tuple(np.atleast_1d(size)) + (N,)
    if pot.is_gaussian:
        z = rng.standard_normal(shape) - pot.a
        return GibbsDraw(center(z), True, 1.0)
    B = pot.bounds[0]
    n = int(np.prod(shape))
    out = np.empty(0)
    proposed = accepted = 0
    while out.size < n:
        batch = max(1024, 2 * (n - out.size))
        z = rng.standard_normal(batch) - pot.a
        keep = rng.random(batch) < np.exp(-pot.delta_eval(z) - B)
        proposed += batch
        accepted += int(keep.sum())
        if proposed >= 10_000 and accepted / proposed < min_acceptance:
            raise SamplerError(f"rejection acceptance {accepted / proposed:.2e} below {min_acceptance}")
        out = np.concatenate([out, z[keep]])
    return GibbsDraw(center(out[:n].reshape(shape)), False, accepted / proposed)


def single_site_cdf(pot: SingleSitePotential, x, n_grid: int = 20001, half_width: float = 12.0):
    """CDF of exp(-psi)/Z by dense trapezoid quadrature (test oracle)."""
    grid = np.linspace(-pot.a - half_width, -pot.a + half_width, n_grid)
    dens = np.exp(-pot(grid, 0) + pot(-pot.a, 0))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    return np.interp(x, grid, cdf / cdf[-1])


def sample_fiber(pot: SingleSitePotential, cache: OperatorCache, y, n_steps: int, dt_f: float, rng,
                 n_chains: int = 1, burn_in: int = 0, thin: int = 1, drift_tol: float = 1e-6,
                 check_every: int = 64, return_chain: bool = False):
    """Unadjusted Langevin chains on the fiber {Px = y}.

    Every chain starts at the foot point NP^t (PNP^t)^{-1} y and moves only
    along ker P. Returns the final states ``(n_chains, N)``, or with
    ``return_chain`` the thinned post-burn-in samples ``(S, n_chains, N)``.
    """
    c = np.asarray(getattr(y, "coeffs", y), dtype=float)
    foot = fiber_foot(cache, c)
    x = np.repeat(foot[None, :], n_chains, axis=0)
    N = cache.N
    kept = []
    for k in range(n_steps):
        g = fiber_decompose(cache, grad_hamiltonian(pot, x))[0]
        xi = fiber_decompose(cache, rng.standard_normal((n_chains, N)))[0]
        x = x - dt_f * g + np.sqrt(2.0 * dt_f) * xi
        if (k + 1) % check_every == 0 or k + 1 == n_steps:
            drift = np.abs(project_lattice(cache, x) - c).max()
            if drift > drift_tol:
                raise FiberDriftError(f"fiber drift {drift:.2e} after {k + 1} steps")
            # snap back onto the fiber to stop rounding from accumulating
            x = fiber_decompose(cache, x)[0] + foot
        if return_chain and k >= burn_in and (k - burn_in) % thin == 0:
            kept.append(x.copy())
    return np.stack(kept) if return_chain else x


def fiber_stationary_covariance(cache: OperatorCache, dt_f: float) -> np.ndarray:
    """Covariance of the Gaussian-case fiber chain: Pi_par / (1 - dt_f / 2)."""
    Pi = fiber_decompose(cache, np.eye(cache.N))[0]
    return 0.5 * (Pi + Pi.T) / (1.0 - 0.5 * dt_f)


# --- initial data and entropy ---------------------------------------------------

def entropy_bound_product_init(pot: SingleSitePotential, shift, n_nodes: int = 200) -> float:
    """Relative entropy per site of the shifted law (s + xi, xi ~ Gibbs) w.r.t. Gibbs.

    Gaussian case: |s|^2 / (2N). Otherwise the product formula
    (1/N) sum_i E[psi(z + s_i) - psi(z)] with z ~ exp(-psi)/Z by Gauss-Hermite.
    """
    s = np.asarray(shift, dtype=float)
    N = s.shape[-1]
    if pot.is_gaussian:
        return float(np.sum(s * s, axis=-1) / (2.0 * N))
    u, w = hermite_rule(n_nodes)
    z = u - pot.a
    w = w * np.exp(-pot.delta_eval(z))
    w = w / w.sum()
    vals = pot(z[None, :] + s.reshape(-1, 1), 0) - pot(z, 0)[None, :]
    return float((vals @ w).sum() / N)


def tilted_initial_states(pot: SingleSitePotential, shift, R: int, seed: int, stream: int = 0):
    """Gibbs draws shifted by the lattice profile ``shift``; one stream per realization."""
    shift = center(shift)
    rngs = realization_rngs(seed, R, stream + 1_000_003)
    draws = np.stack([sample_gibbs(pot, shift.shape[-1], g).x for g in rngs])
    return draws + shift


# --- exact Gaussian law flow (entropy production check) ---------------------------

def _A_eig(N: int):
    A = apply_A(np.eye(N), N)
    lam, U = np.linalg.eigh(A)
    return lam, U


def gaussian_law_flow(N: int, m0, C0, times):
    """Exact law N(m(t), C(t)) of the Gaussian Kawasaki SDE.

    m(t) = e^{-At} m0 and C(t) = e^{-At} (C0 - Pi) e^{-At} + Pi with Pi the
    mean-zero projector, which is the stationary covariance.
    """
    lam, U = _A_eig(N)
    Pi = np.eye(N) - 1.0 / N
    out = []
    for t in np.atleast_1d(times):
        E = (U * np.exp(-lam * t)) @ U.T
        out.append((E @ m0, E @ (C0 - Pi) @ E + Pi))
    return out


def gaussian_kl_to_gibbs(m, C) -> float:
    """KL(N(m, C) | projected standard normal) on the mean-zero hyperplane."""
    N = len(m)
    Pi = np.eye(N) - 1.0 / N
    C = Pi @ C @ Pi
    ev = np.linalg.eigvalsh(0.5 * (C + C.T))[1:]   # drop the constant direction
    return float(0.5 * (ev.sum() - (N - 1) + np.dot(m, m) - np.log(ev).sum()))
