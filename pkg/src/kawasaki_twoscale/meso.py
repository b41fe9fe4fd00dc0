"""Mesoscopic layer: coarse-grained drift evaluators and the ODE on the spline space."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
from scipy import linalg

from .core import ConfigurationError, MultiscaleGrid, SingleSitePotential, hermite_rule
from .micro import grad_hamiltonian, sample_fiber
from .operators import (OperatorCache, apply_A, assemble, fiber_decompose, fiber_foot,
                        mean_zero_basis, project_function, project_lattice, solve_pnpt)
from .splines import SplineField

RK4_STABILITY = 2.78   # real-axis stability limit of classical RK4


class ModeError(ConfigurationError):
    """Raised when a drift mode is not valid for the potential."""


class PrecisionError(RuntimeError):
    """Raised when the MCMC drift estimate misses its standard-error cap."""


class StiffnessError(RuntimeError):
    """Raised when the ODE step must be cut too many times."""


@dataclass(frozen=True)
class MesoDriftMode:
    """Which evaluator supplies the coarse-grained drift.

    ``kind`` is ``"gaussian_exact"``, ``"mcmc"`` or ``"surrogate_phi"``. The
    mcmc fields set the fixed sample budget; ``table`` is a free-energy table
    (needed by ``surrogate_phi``).
    """

    kind: str = "gaussian_exact"
    n_chains: int = 64
    n_steps: int = 2000
    burn_in: int = 500
    thin: int = 10
    dt_f: float = 0.05
    se_cap: float = np.inf
    seed: int = 0
    table: Any = None

    def validate(self, pot: SingleSitePotential) -> None:
        if self.kind not in ("gaussian_exact", "mcmc", "surrogate_phi"):
            raise ModeError(f"unknown drift mode {self.kind!r}")
        if self.kind == "gaussian_exact" and not (pot.is_gaussian and pot.a == 0.0):
            raise ModeError("gaussian_exact drift requires the pure Gaussian potential")
        if self.kind == "surrogate_phi" and self.table is None:
            raise ModeError("surrogate_phi drift needs a free-energy table")


class FiberAverage(NamedTuple):
    """Fiber average of grad H (lattice vector) with its Monte Carlo standard error."""

    mean: np.ndarray
    stderr: np.ndarray


def _coeffs(y):
    return np.asarray(getattr(y, "coeffs", y), dtype=float)


def grad_hbar(cache: OperatorCache, pot: SingleSitePotential, mode: MesoDriftMode, y, rng=None):
    """Gradient of the coarse-grained Hamiltonian (or its mcmc stand-in).

    Returns a ``SplineField`` for ``gaussian_exact`` ((PNP^t)^{-1} y) and
    ``surrogate_phi`` (P(phi' o y)); ``mcmc`` returns the raw ``FiberAverage``
    of grad H, which ``meso_rhs`` pushes through P A.
    """
    mode.validate(pot)
    c = _coeffs(y)
    if mode.kind == "gaussian_exact":
        return SplineField(solve_pnpt(cache, c))
    if mode.kind == "surrogate_phi":
        yf = SplineField(c)
        table = mode.table
        return project_function(cache, lambda th: table.phi_prime(yf(th)))
    rng = np.random.default_rng(mode.seed) if rng is None else rng
    chain = sample_fiber(pot, cache, c, mode.n_steps, mode.dt_f, rng, n_chains=mode.n_chains,
                         burn_in=mode.burn_in, thin=mode.thin, return_chain=True)
    g = grad_hamiltonian(pot, chain)                      # (S, chains, N)
    per_chain = g.mean(axis=0)
    mean = per_chain.mean(axis=0)
    stderr = per_chain.std(axis=0, ddof=1) / np.sqrt(mode.n_chains)
    return FiberAverage(mean, stderr)


def meso_rhs(cache: OperatorCache, pot: SingleSitePotential, mode: MesoDriftMode, eta, rng=None) -> SplineField:
    """Right-hand side -Abar grad Hbar(eta) (or -P A E_fiber[grad H] in mcmc mode)."""
    g = grad_hbar(cache, pot, mode, eta, rng)
    if isinstance(g, FiberAverage):
        out = -project_lattice(cache, apply_A(g.mean, cache.N))
        if np.isfinite(mode.se_cap):
            se = mcmc_rhs_stderr(cache, g)
            rel = se.max() / max(np.abs(out).max(), 1e-300)
            if rel > mode.se_cap:
                raise PrecisionError(f"relative standard error {rel:.3g} exceeds cap {mode.se_cap}")
    else:
        out = -cache.gram_solve(g.coeffs @ cache.stiffness)
    return SplineField(out - out.mean(axis=-1, keepdims=True))


def mcmc_rhs_stderr(cache: OperatorCache, g: FiberAverage) -> np.ndarray:
    """Crude per-coefficient standard error of the mcmc right-hand side."""
    return np.abs(project_lattice(cache, apply_A(g.stderr, cache.N)))


def linear_meso_matrix(cache: OperatorCache) -> np.ndarray:
    """Matrix J with rhs = J c in gaussian_exact mode: -G^{-1} S T^{-1} G."""
    GS = cache.gram_solve(cache.stiffness.T).T            # G^{-1} S
    return -GS @ cache.T_solve(cache.gram.T).T


def stiffness_estimate(cache: OperatorCache, pot: SingleSitePotential, mode: MesoDriftMode) -> float:
    """Upper estimate of the largest decay rate of the linearised ODE."""
    lam_abar = float(cache.abar_eigs.max()) if cache.abar_eigs.size else 0.0
    if mode.kind == "gaussian_exact":
        ev = np.linalg.eigvals(linear_meso_matrix(cache))
        return float(np.abs(ev).max())
    if mode.kind == "surrogate_phi":
        return lam_abar * float(mode.table.Lam_num)
    return lam_abar * pot.stiffness / float(cache.pnpt_eigs.min())


def meso_integrate(cache: OperatorCache, pot: SingleSitePotential, mode: MesoDriftMode, eta0, T: float,
                   dt_meso: float, snapshot_times=None, max_halvings: int = 8):
    """Classical RK4 for d eta/dt = meso_rhs(eta).

    Returns ``(times, coeffs)`` with one row per snapshot time (default: 21
    uniform times on [0, T]). ``dt_meso`` is cut in half while
    ``dt * stiffness`` exceeds the RK4 stability limit; too many cuts raise
    ``StiffnessError``.
    """
    mode.validate(pot)
    times = np.linspace(0.0, T, 21) if snapshot_times is None else np.asarray(snapshot_times, float)
    lam = stiffness_estimate(cache, pot, mode)
    dt = float(dt_meso)
    for _ in range(max_halvings + 1):
        if dt * lam <= RK4_STABILITY:
            break
        dt *= 0.5
    else:
        raise StiffnessError(f"dt_meso={dt_meso:.3g} too large for stiffness {lam:.3g}; use dt <= "
                             f"{RK4_STABILITY / lam:.3g}")
    rng = np.random.default_rng(mode.seed)

    def f(c):
        return meso_rhs(cache, pot, mode, c, rng).coeffs

    c = _coeffs(eta0).astype(float).copy()
    c -= c.mean()
    out = []
    t = 0.0
    for target in times:
        n = int(np.ceil((target - t) / dt - 1e-9))
        h = (target - t) / n if n > 0 else 0.0
        for _ in range(n):
            k1 = f(c)
            k2 = f(c + 0.5 * h * k1)
            k3 = f(c + 0.5 * h * k2)
            k4 = f(c + h * k3)
            c = c + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            c -= c.mean()
            if not np.all(np.isfinite(c)):
                raise StiffnessError("non-finite mesoscopic state; reduce dt_meso")
        t = target
        out.append(c.copy())
    return times, np.array(out)


# --- gradient identity at tiny size ---------------------------------------------

_LIN = np.array([1.0, -0.5, 0.25, 2.0, -1.0, 0.5, 0.0, -0.75])

TEST_FUNCTIONS = {
    "constant": (lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros_like(x)),
    "linear": (lambda x: x @ np.resize(_LIN, x.shape[-1]),
               lambda x: np.broadcast_to(np.resize(_LIN, x.shape[-1]), x.shape)),
    "square": (lambda x: x[..., 0] ** 2, lambda x: np.concatenate(
        [2 * x[..., :1], np.zeros_like(x[..., 1:])], axis=-1)),
}


def _fiber_rule(cache: OperatorCache, n_nodes: int):
    """Orthonormal basis V of ker P (inside X_N) and a 1-D Gauss-Hermite rule."""
    Pi = fiber_decompose(cache, np.eye(cache.N))[0]
    lam, U = linalg.eigh(0.5 * (Pi + Pi.T))
    return U[:, lam > 0.5], hermite_rule(n_nodes)


def _fiber_expectations(pot, cache, c, V, rule, funcs):
    """Fiber expectations of each callable in ``funcs`` by tensor Gauss-Hermite quadrature.

    The Gaussian part exp(-|s|^2/2) of exp(-H) is the rule's weight; the
    perturbation contributes the extra factor exp(-sum_i dpsi(x_i)). The tilt
    drops out on the mean-zero hyperplane. Nodes are processed in slabs of
    fixed leading index to bound memory.
    """
    u, w = rule
    d = V.shape[1]
    foot = fiber_foot(cache, c)
    rest_s = np.array(list(itertools.product(u, repeat=d - 1)))
    rest_w = np.prod(np.array(list(itertools.product(w, repeat=d - 1))), axis=1)
    base = foot[None, :] + rest_s @ V[:, 1:].T
    acc = None
    total = 0.0
    for u0, w0 in zip(u, w):
        x = base + u0 * V[:, 0]
        wt = w0 * rest_w
        if not pot.is_gaussian:
            wt = wt * np.exp(-np.sum(pot.delta_eval(x), axis=-1))
        part = [np.tensordot(wt, fn(x), axes=(0, 0)) for fn in funcs]
        acc = part if acc is None else [a + p for a, p in zip(acc, part)]
        total += wt.sum()
    return [a / total for a in acc]


def check_gradient_identity(pot: SingleSitePotential, tests=None, y=None, N: int = 8, M: int = 2,
                            n_nodes: int | None = None, h: float = 1e-2) -> dict:
    """Both sides of E[grad f | y] = P^t grad fbar(y) + cov(f, grad H | y) at tiny size.

    ``tests`` maps names to ``(f, grad_f)`` pairs (default ``TEST_FUNCTIONS``).
    ``n_nodes`` Gauss-Hermite nodes per fiber dimension default to 8 for the
    Gaussian potential (exact for the polynomial test functions) and 14
    otherwise (residual about 1e-8 for the cosine library potential).
    Gradients are taken inside the mean-zero hyperplane. ``grad fbar`` (the
    L^2 gradient on the spline space) comes from Richardson-extrapolated
    central differences of ``fbar`` in ``y``, so the right-hand side is not
    computed through the identity itself.

    Returns ``{name: {"residual", "lhs", "rhs"}}``; if PNP^t is too poorly
    conditioned at this size every entry carries ``"skipped"`` instead.
    """
    tests = TEST_FUNCTIONS if tests is None else tests
    if n_nodes is None:
        n_nodes = 8 if pot.is_gaussian else 14
    try:
        cache = assemble(MultiscaleGrid(N, M, K_min=1))
    except Exception as exc:   # conditioning is reported, not fatal
        return {name: {"residual": np.nan, "skipped": str(exc)} for name in tests}
    c = np.zeros(M) if y is None else _coeffs(y) - np.mean(_coeffs(y))
    V, rule = _fiber_rule(cache, n_nodes)
    Pi0 = np.eye(N) - 1.0 / N
    names = list(tests)
    fs = [tests[k][0] for k in names]

    def gh(x):
        return grad_hamiltonian(pot, x) @ Pi0

    funcs = [gh]
    for f, gf in (tests[k] for k in names):
        funcs += [f, (lambda x, gf=gf: np.asarray(gf(x)) @ Pi0), (lambda x, f=f: f(x)[:, None] * gh(x))]
    vals = _fiber_expectations(pot, cache, c, V, rule, funcs)
    EgH = vals[0]

    Z = mean_zero_basis(M)
    D = np.zeros((len(names), Z.shape[1]))
    for k in range(Z.shape[1]):
        z = Z[:, k]
        fb = {s: np.array(_fiber_expectations(pot, cache, c + s * h * z, V, rule, fs))
              for s in (-1.0, -0.5, 0.5, 1.0)}
        d1 = (fb[1.0] - fb[-1.0]) / (2 * h)
        d2 = (fb[0.5] - fb[-0.5]) / h
        D[:, k] = (4 * d2 - d1) / 3
    out = {}
    for i, name in enumerate(names):
        Ef, Egf, EfgH = vals[1 + 3 * i: 4 + 3 * i]
        g = Z @ np.linalg.solve(Z.T @ cache.gram @ Z, D[i])   # Riesz representer in L^2
        rhs = g @ cache.lift.T / N + (EfgH - Ef * EgH)         # P^t = NP^t / N
        out[name] = {"residual": float(np.abs(Egf - rhs).max()), "lhs": Egf, "rhs": rhs}
    return out
