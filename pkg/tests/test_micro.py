import numpy as np
import pytest
from scipy import stats

from kawasaki_twoscale.core import ConfigurationError, MultiscaleGrid
from kawasaki_twoscale.micro import (DivergenceError, EnsembleSpec, KawasakiState, difference_adjoint,
                                     em_stationary_variance, entropy_bound_product_init,
                                     fiber_stationary_covariance, gaussian_kl_to_gibbs, gaussian_law_flow,
                                     grad_hamiltonian, hamiltonian, kawasaki_step, max_stable_dt,
                                     mode_decay_factor, sample_fiber, sample_gibbs, simulate_ensemble,
                                     single_site_cdf, snapshot_schedule, tilted_initial_states)
from kawasaki_twoscale.norms import hneg1_norm
from kawasaki_twoscale.operators import apply_A, fiber_foot, get_cache, project_lattice

from conftest import mean_zero


def test_hamiltonian_basics(gauss, cos_pot, rng):
    x = rng.standard_normal(10)
    np.testing.assert_allclose(grad_hamiltonian(gauss, x), x)
    assert hamiltonian(cos_pot, np.zeros(7)) == pytest.approx(7 * cos_pot(0.0))
    h = 1e-5
    E = np.eye(10)
    fd = np.array([(hamiltonian(cos_pot, x + h * e) - hamiltonian(cos_pot, x - h * e)) / (2 * h) for e in E])
    assert np.abs(fd - grad_hamiltonian(cos_pot, x)).max() <= 1e-6


def test_noise_factorisation():
    N = 9
    Dt = difference_adjoint(np.eye(N), N)      # rows are D^T e_i
    np.testing.assert_allclose(Dt @ Dt.T, apply_A(np.eye(N), N), atol=1e-9)
    assert np.allclose(Dt.sum(axis=1), 0)


def test_step_conserves_mass(cos_pot, rng):
    grid = MultiscaleGrid(64, 8)
    s = KawasakiState(mean_zero(rng, 5, 64))
    dt = max_stable_dt(cos_pot, 64)
    for _ in range(20):
        s = kawasaki_step(cos_pot, grid, s, dt, rng.standard_normal((5, 64)))
    assert np.abs(s.x.sum(axis=-1)).max() <= 1e-12 * 64 * np.abs(s.x).max()
    assert s.step == 20 and s.t == pytest.approx(20 * dt)


def test_noiseless_mode_decay(gauss):
    N, k = 32, 3
    grid = MultiscaleGrid(N, 4)
    x = np.cos(2 * np.pi * k * np.arange(N) / N)
    dt = max_stable_dt(gauss, N)
    s = kawasaki_step(gauss, grid, KawasakiState(x), dt)
    np.testing.assert_allclose(s.x, mode_decay_factor(N, k, dt) * x, atol=1e-12)


def test_divergence_is_reported(gauss):
    grid = MultiscaleGrid(16, 4)
    with pytest.raises(DivergenceError, match="step 1"):
        kawasaki_step(gauss, grid, KawasakiState(np.zeros(16)), 1e-3, np.full(16, np.nan))


def test_ensemble_spec_validation(gauss):
    EnsembleSpec(R=4, dt=max_stable_dt(gauss, 64)).validate(gauss, 64)
    with pytest.raises(ConfigurationError):
        EnsembleSpec(R=4, dt=1.0).validate(gauss, 64)
    with pytest.raises(ConfigurationError):
        EnsembleSpec(R=0, dt=1e-6).validate(gauss, 64)
    with pytest.raises(ConfigurationError):
        EnsembleSpec(R=1, dt=1e-6, initializer="hot").validate(gauss, 64)


def test_snapshot_schedule():
    dt, per, times = snapshot_schedule(0.02, 3e-5)
    assert len(times) == 21 and dt <= 3e-5
    assert dt * per * 20 == pytest.approx(0.02)


def test_gaussian_stationary_variance(gauss):
    N, R = 16, 1000
    grid = MultiscaleGrid(N, 4)
    x0 = sample_gibbs(gauss, N, np.random.default_rng(1), size=R).x
    dt = max_stable_dt(gauss, N)
    _, snaps, dt = simulate_ensemble(gauss, grid, x0, 0.2, dt, seed=3, n_intervals=4)
    v = snaps[-1].var(axis=0, ddof=1).mean()
    want = float(np.mean(em_stationary_variance(N, dt)))
    # the discretised chain's stationary variance, not the continuum 1 - 1/N
    assert want > 1 - 1 / N
    assert v == pytest.approx(want, rel=0.05)
    assert np.abs(snaps.sum(axis=-1)).max() <= 1e-9 * N


def test_stationary_hneg1_of_projection_is_flat(gauss):
    N, R = 64, 256
    cache = get_cache(N, 4)
    x0 = sample_gibbs(gauss, N, np.random.default_rng(5), size=R).x
    times, snaps, _ = simulate_ensemble(gauss, cache.grid, x0, 0.01, max_stable_dt(gauss, N), seed=9,
                                        n_intervals=4)
    from kawasaki_twoscale.splines import SplineField
    vals = np.array([hneg1_norm(SplineField(project_lattice(cache, s))) ** 2 for s in snaps])  # (S, R)
    m = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(m - m.mean()) <= 3 * np.sqrt(se ** 2 + se.mean() ** 2))


def test_thread_count_does_not_change_results(cos_pot, rng):
    grid = MultiscaleGrid(32, 4)
    x0 = mean_zero(rng, 6, 32)
    dt = max_stable_dt(cos_pot, 32)
    a = simulate_ensemble(cos_pot, grid, x0, 0.002, dt, seed=11, threads=1)[1]
    b = simulate_ensemble(cos_pot, grid, x0, 0.002, dt, seed=11, threads=3)[1]
    assert np.array_equal(a, b)


def test_gibbs_gaussian_covariance(gauss):
    N = 6
    d = sample_gibbs(gauss, N, np.random.default_rng(2), size=10_000)
    assert d.exact
    assert np.abs(d.x.sum(axis=-1)).max() < 1e-12
    C = np.cov(d.x.T)
    assert np.abs(C - (np.eye(N) - 1 / N)).max() <= 5e-2


def test_gibbs_general_marginal_ks(cos_pot):
    d = sample_gibbs(cos_pot, 1000, np.random.default_rng(4), size=100)
    assert not d.exact
    res = stats.kstest(d.x.ravel(), lambda v: single_site_cdf(cos_pot, v))
    assert res.pvalue > 0.01


def test_fiber_sampler_gaussian(gauss):
    cache = get_cache(32, 4)
    y = np.array([0.3, -0.1, -0.4, 0.2])
    dt_f = 0.05
    chain = sample_fiber(gauss, cache, y, 3000, dt_f, np.random.default_rng(6), n_chains=32,
                         burn_in=500, thin=5, return_chain=True)
    flat = chain.reshape(-1, 32)
    assert np.abs(project_lattice(cache, flat) - y).max() <= 1e-9
    foot = fiber_foot(cache, y)
    se = flat.std(axis=0) / np.sqrt(32 * 10)      # conservative effective sample size
    assert np.all(np.abs(flat.mean(axis=0) - foot) <= 5 * se)
    want = np.diag(fiber_stationary_covariance(cache, dt_f))
    np.testing.assert_allclose(flat.var(axis=0).mean(), want.mean(), rtol=0.05)


def test_entropy_bound(gauss, cos_pot, rng):
    s = mean_zero(rng, 40)
    assert entropy_bound_product_init(gauss, np.zeros(40)) == 0.0
    assert entropy_bound_product_init(gauss, s) == pytest.approx(s @ s / 80)
    assert entropy_bound_product_init(gauss, 2 * s) == pytest.approx(4 * entropy_bound_product_init(gauss, s))
    assert entropy_bound_product_init(cos_pot, np.zeros(40)) == pytest.approx(0.0, abs=1e-14)
    assert entropy_bound_product_init(cos_pot, s) > 0


def test_tilted_initial_states_mean(gauss, rng):
    s = mean_zero(rng, 24)
    x = tilted_initial_states(gauss, s, 4000, seed=0)
    np.testing.assert_allclose(x.mean(axis=0), s, atol=0.1)


def test_gaussian_entropy_decreases_along_law_flow(rng):
    N = 12
    m0 = mean_zero(rng, N)
    C0 = 0.3 * (np.eye(N) - 1 / N)
    kl = [gaussian_kl_to_gibbs(m, C) for m, C in gaussian_law_flow(N, m0, C0, np.linspace(0, 0.05, 11))]
    assert np.all(np.diff(kl) <= 1e-12)
    assert kl[-1] < kl[0]


def test_moment_bound(gauss, rng):
    N = 64
    s = 2 * np.cos(2 * np.pi * np.arange(N) / N)
    x0 = tilted_initial_states(gauss, s, 64, seed=1)
    _, snaps, _ = simulate_ensemble(gauss, MultiscaleGrid(N, 4), x0, 0.005, max_stable_dt(gauss, N),
                                    seed=1, n_intervals=5)
    c_ent = entropy_bound_product_init(gauss, s)
    moment = (snaps ** 2).sum(axis=-1).mean(axis=-1)
    assert moment.max() <= 4 * N * (c_ent + 1)
