import csv

import numpy as np
import pytest

from kawasaki_twoscale.core import ConfigurationError
from kawasaki_twoscale.macro import (MacroField, build_free_energy, explicit_dt_cap, legendre_grid_search,
                                     log_partition, macro_bounds_check, macro_energy, macro_energy_decay_check,
                                     macro_solve, macro_step, solve_sigma)

# adaptive scipy.quad + Brent oracle for psi = x^2/2 + a x + 0.5 cos(x + 1) (see notes/oracles)
PHI_ORACLE = {          # m: (phi(m), phi'(m))
    -2.0: (0.7549262350814265, -1.524970126872839),
    -0.5: (-0.6703277753628775, -0.3929486975209859),
    0.0: (-0.7700438918674285, 0.0),
    0.7: (-0.5548766170407866, 0.635819753300579),
    1.5: (0.3026092238790614, 1.5410824549725055),
    3.0: (4.081898816159851, 3.4818575169538173),
}


@pytest.fixture(scope="module")
def gtab(gauss):
    return build_free_energy(gauss)


@pytest.fixture(scope="module")
def ctab(cos_pot):
    return build_free_energy(cos_pot)


def heat(G, t, k=1):
    return np.exp(-4 * np.pi ** 2 * k * k * t) * np.cos(2 * np.pi * k * MacroField.centers(G))


def test_gaussian_free_energy(gtab):
    m = np.linspace(-3.9, 3.9, 157)
    assert np.abs(gtab.phi_prime(m) - m).max() <= 1e-10
    assert np.abs(gtab.phi_double_prime(m) - 1).max() <= 1e-8
    assert gtab.lam_num == pytest.approx(1.0, abs=1e-8)
    assert gtab.Lam_num == pytest.approx(1.0, abs=1e-8)


def test_log_partition_derivatives(cos_pot):
    s, h = np.array([-1.0, 0.3, 2.0]), 1e-4
    lam, d1, d2 = log_partition(cos_pot, s)
    lp, lm = log_partition(cos_pot, s + h)[0], log_partition(cos_pot, s - h)[0]
    np.testing.assert_allclose((lp - lm) / (2 * h), d1, atol=1e-8)
    np.testing.assert_allclose((lp - 2 * lam + lm) / h ** 2, d2, atol=1e-5)
    sig = solve_sigma(cos_pot, d1)
    np.testing.assert_allclose(sig, s, atol=1e-11)


def test_cosine_free_energy_matches_oracle(ctab):
    m = np.array(list(PHI_ORACLE))
    want = np.array(list(PHI_ORACLE.values()))
    np.testing.assert_allclose(ctab.phi(m), want[:, 0], atol=1e-7)
    np.testing.assert_allclose(ctab.phi_prime(m), want[:, 1], atol=1e-7)


def test_cosine_free_energy_shape(ctab):
    assert abs(float(ctab.phi_prime(0.0))) <= 1e-8
    m = np.linspace(-3, 3, 601)
    assert ctab.phi_double_prime(m).min() > 0
    assert np.all(np.diff(ctab.sigma_star) > 0)
    assert 0 < ctab.lam_num < 1 < ctab.Lam_num


def test_legendre_grid_search(ctab, cos_pot):
    m = np.array([-2.5, 0.4, 1.7])
    np.testing.assert_allclose(legendre_grid_search(cos_pot, m), ctab.phi(m), atol=1e-6)


def test_table_range_and_csv(gtab, tmp_path):
    with pytest.raises(ConfigurationError):
        gtab.phi_prime(5.0)
    p = tmp_path / "fe.csv"
    gtab.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["m", "phi", "phi_prime", "phi_double_prime"]
    assert len(rows) == len(gtab.m_grid) + 1


def test_macro_step_basics(gtab):
    assert np.all(macro_step(gtab, np.zeros(32), 1e-5).values == 0)
    with pytest.raises(ConfigurationError):
        macro_step(gtab, np.zeros(32), 10 * explicit_dt_cap(gtab, 32))
    with pytest.raises(ConfigurationError):
        macro_step(gtab, np.zeros(32), 1e-5, mode="rk2")


def test_heat_kernel_reproduction(gtab):
    G = 256
    z0 = MacroField.from_function(lambda th: np.cos(2 * np.pi * th), G)
    times, vals, _ = macro_solve(gtab, z0, 0.05)
    want = heat(G, 0.05)
    assert np.abs(vals[-1] - want).max() <= 1e-3 * np.abs(want).max()
    assert np.abs(vals.mean(axis=-1)).max() <= 1e-12
    _, vi, _ = macro_solve(gtab, z0, 0.05, dt=1e-3, mode="semi_implicit")
    assert np.abs(vi[-1] - want).max() <= 5e-2 * np.abs(want).max()


def test_spatial_self_convergence(gtab):
    errs = []
    for G, dt in ((32, 2e-4), (64, 5e-5)):
        z0 = MacroField.from_function(lambda th: np.cos(2 * np.pi * th), G)
        _, v, _ = macro_solve(gtab, z0, 0.02, dt=dt)
        errs.append(np.abs(v[-1] - heat(G, 0.02)).max())
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_energy(gtab, ctab):
    assert macro_energy(gtab, np.zeros(16)) == pytest.approx(float(gtab.phi(0.0)))
    z = MacroField.from_function(lambda th: np.sin(2 * np.pi * th), 64).values
    assert macro_energy(gtab, z) - float(gtab.phi(0.0)) == pytest.approx(0.5 * np.mean(z ** 2), rel=1e-8)
    G = 64
    z0 = MacroField.from_function(lambda th: 1.5 * np.cos(2 * np.pi * th), G)
    _, v, dt = macro_solve(ctab, z0, 0.01, record_all=True)
    rep = macro_energy_decay_check(ctab, v, dt)
    assert rep["passed"], rep


def test_bounds(gtab, ctab):
    G = 128
    z0 = MacroField.from_function(lambda th: np.cos(2 * np.pi * th), G)
    t, v, _ = macro_solve(gtab, z0, 0.05)
    rep = macro_bounds_check(gtab, t, v)
    assert rep["passed"] and rep["sup_ratio"] <= 1.0 + 1e-12
    z1 = MacroField.from_function(lambda th: 2 * np.cos(2 * np.pi * th) + np.sin(6 * np.pi * th), G)
    t, v, _ = macro_solve(ctab, z1, 0.05)
    rep = macro_bounds_check(ctab, t, v)
    assert rep["passed"] and rep["sup_ratio"] <= ctab.Lam_num / ctab.lam_num
    l2 = np.mean(v ** 2, axis=-1)
    assert np.all(np.diff(l2) <= 1e-12)
