"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import json

import numpy as np
import pytest

from kawasaki_twoscale.core import MultiscaleGrid, cosine_potential, gaussian_potential
from kawasaki_twoscale.harness import (ExperimentConfig, default_config, fit_rate, run_full_limit,
                                       run_meso_to_macro, run_micro_to_meso, write_outputs)
from kawasaki_twoscale.macro import (MacroField, build_free_energy, legendre_grid_search, macro_bounds_check,
                                     macro_energy_decay_check, macro_solve)
from kawasaki_twoscale.meso import TEST_FUNCTIONS, check_gradient_identity
from kawasaki_twoscale.norms import (NormWorkspace, abar_norm, dirichlet_form, discrete_poincare_constant,
                                     discrete_poincare_measured, h1_seminorm, norm_equivalence_extremes)
from kawasaki_twoscale.operators import (apply_A, apply_ANPt, apply_ANPt_abar_inv, assemble, fiber_decompose,
                                         fiber_poincare_constant, get_cache, lift_NPt)
from kawasaki_twoscale.norms import l2_norm
from kawasaki_twoscale.splines import SplineField, bspline_eval, gram_by_integration, gram_matrix


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def mz(rng, *shape):
    x = rng.standard_normal(shape)
    return x - x.mean(axis=-1, keepdims=True)


def test_01_spline_algebra(verdict):
    rng = np.random.default_rng(1)
    gram_err = 0.0
    for M in (5, 8, 16, 32):
        want = np.zeros((M, M))
        for d, v in zip(range(3), (11 / 20, 13 / 60, 1 / 120)):
            for j in range(M):
                want[j, (j + d) % M] = want[j, (j - d) % M] = v / M
        gram_err = max(gram_err, np.abs(gram_matrix(M) - want).max(),
                       np.abs(gram_by_integration(M) - want).max())
    th = rng.random(1000)
    pu = max(np.abs(sum(bspline_eval(M, j, th) for j in range(M)) - 1).max() for M in (5, 8, 16))
    rel = 0.0
    for N, M in ((40, 5), (64, 8), (256, 16), (1024, 32)):
        cache = get_cache(N, M)
        y = mz(rng, 20, M)
        comp = apply_A(lift_NPt(cache, y), N)
        rel = max(rel, np.abs(apply_ANPt(cache, y) - comp).max() / np.abs(comp).max())
    ok = gram_err <= 1e-12 and pu <= 1e-12 and rel <= 1e-9
    verdict(1, ok, f"gram err {gram_err:.1e}, partition of unity {pu:.1e}, ANPt closed form rel {rel:.1e}")


def test_02_defect_scaling(verdict):
    Ks = [8, 16, 32, 64]
    d = [assemble(MultiscaleGrid(8 * K, 8)).defect for K in Ks]
    fr = fit_rate([(K, v, 0.0) for K, v in zip(Ks, d)])
    verdict(2, abs(fr.slope + 2) <= 0.3, f"defect slope {fr.slope:.3f} (defects {', '.join(f'{v:.2e}' for v in d)})")


def test_03_sigma_floor(verdict):
    rng = np.random.default_rng(3)
    worst = np.inf
    for M in (4, 8, 16):
        for K in (16, 32, 64, 128):
            cache = get_cache(M * K, M)
            y = mz(rng, 100, M)
            r = l2_norm(SplineField(y)) / l2_norm(apply_ANPt_abar_inv(cache, y))
            worst = min(worst, float(r.min()))
    verdict(3, worst >= 0.1, f"min ratio {worst:.4f} over M in {{4,8,16}}, K in {{16..128}} (floor 0.1)")


def test_04_norm_equivalences(verdict):
    rng = np.random.default_rng(4)
    Ks = (16, 32, 64)
    inside, shrink = True, {}
    lo_all, hi_all = np.inf, -np.inf
    for M in (4, 8, 16):
        w_inv, w_pos = [], []
        for K in Ks:
            cache = get_cache(M * K, M)
            y = mz(rng, 100, M)
            r_inv = abar_norm(cache, y, -1) / NormWorkspace(cache).hneg1_spline(y)
            r_pos = abar_norm(cache, y, 1) / h1_seminorm(SplineField(y))
            for r in (r_inv, r_pos):
                inside &= bool(1 / 3 <= r.min() and r.max() <= 3)
                lo_all, hi_all = min(lo_all, r.min()), max(hi_all, r.max())
            ex = norm_equivalence_extremes(cache)
            w_inv.append(ex["abar_inv_over_hneg1"][1] - ex["abar_inv_over_hneg1"][0])
            w_pos.append(ex["abar_over_h1"][1] - ex["abar_over_h1"][0])
        shrink[f"inv M={M}"] = all(b < a for a, b in zip(w_inv, w_inv[1:]))
        shrink[f"pos M={M}"] = all(b < a for a, b in zip(w_pos, w_pos[1:]))
    failing = [k for k, v in shrink.items() if not v]
    verdict(4, inside and not failing,
            f"ratios in [{lo_all:.4f}, {hi_all:.4f}] within [1/3, 3]: {inside}; width not shrinking for: "
            f"{failing or 'none'}")


def test_05_poincare_pair(verdict):
    rng = np.random.default_rng(5)
    cdp = []
    holds = True
    for N in (64, 128, 256, 512, 1024):
        c = discrete_poincare_measured(N)
        cdp.append(c)
        x = mz(rng, 1000, N)
        holds &= bool(np.all(np.sum(x * x, 1) <= discrete_poincare_constant(N) * N * N
                             * np.sum(np.diff(x, axis=1) ** 2, 1)))
    gam = []
    for N, M in ((64, 4), (128, 8), (256, 8), (256, 16), (512, 16), (1024, 32)):
        cache = get_cache(N, M)
        g = fiber_poincare_constant(cache)
        gam.append(g)
        x = mz(rng, 1000, N)
        par = fiber_decompose(cache, x)[0]
        holds &= bool(np.all(np.sum(par ** 2, 1) <= g / M ** 2 * dirichlet_form(x) * (1 + 1e-9)))
    ok = holds and max(cdp) <= 1.01 / np.pi ** 2 and max(gam) <= 1.0
    verdict(5, ok, f"discrete C in [{min(cdp):.5f}, {max(cdp):.5f}], gamma in [{min(gam):.4f}, {max(gam):.4f}], "
                   f"sample bounds hold: {holds}")


def test_06_gradient_identity(verdict):
    y = np.array([0.4, -0.4])
    res = {}
    for pot in (gaussian_potential(), cosine_potential(0.5, 1.0, 1.0)):
        for name, r in check_gradient_identity(pot, TEST_FUNCTIONS, y).items():
            res[f"{pot.name}/{name}"] = r["residual"]
    worst = max(res.values())
    verdict(6, np.isfinite(worst) and worst <= 1e-6,
            "residuals " + ", ".join(f"{k} {v:.1e}" for k, v in res.items()))


def test_07_free_energy(verdict):
    g = build_free_energy(gaussian_potential())
    m = np.linspace(-4, 4, 801)
    gauss_err = float(np.abs(g.phi_prime(m) - m).max())
    pot = cosine_potential(0.5, 1.0, 1.0)
    t = build_free_energy(pot)
    probe = np.array([-3.0, -1.5, -0.2, 0.0, 0.9, 2.2, 3.0])
    legendre_gap = float(np.abs(legendre_grid_search(pot, probe) - t.phi(probe)).max())
    d0 = abs(float(t.phi_prime(0.0)))
    curv = float(t.phi_double_prime(np.linspace(-3, 3, 6001)).min())
    ok = gauss_err <= 1e-10 and legendre_gap <= 1e-6 and d0 <= 1e-8 and curv > 0
    verdict(7, ok, f"Gaussian phi' err {gauss_err:.1e}, Legendre gap {legendre_gap:.1e}, "
                   f"|phi'(0)| {d0:.1e}, min phi'' on [-3,3] {curv:.4f}")


def test_08_macro_solver(verdict):
    gt = build_free_energy(gaussian_potential())
    G = 256
    z0 = MacroField.from_function(lambda th: np.cos(2 * np.pi * th), G)
    times, vals, _ = macro_solve(gt, z0, 0.05)
    want = np.exp(-4 * np.pi ** 2 * 0.05) * np.cos(2 * np.pi * MacroField.centers(G))
    rel = float(np.abs(vals[-1] - want).max() / np.abs(want).max())
    ct = build_free_energy(cosine_potential(0.5, 1.0, 1.0))
    zc = MacroField.from_function(lambda th: 2 * np.cos(2 * np.pi * th) + np.sin(6 * np.pi * th), 128)
    ok_energy = True
    for table, z in ((gt, z0), (ct, zc)):
        _, v, dt = macro_solve(table, z, 0.02, record_all=True)
        ok_energy &= macro_energy_decay_check(table, v, dt)["monotone"]
    t2, v2, _ = macro_solve(ct, zc, 0.05)
    b = macro_bounds_check(ct, t2, v2)
    ok = rel <= 1e-3 and ok_energy and b["passed"]
    verdict(8, ok, f"heat-kernel rel err {rel:.1e}, energy monotone {ok_energy}, sup ratio "
                   f"{b['sup_ratio']:.3f} <= {b['sup_bound']:.3f}, chain bound {b['chain_ok']}")


def test_09_meso_to_macro_rate(verdict):
    rep = run_meso_to_macro(default_config("meso_to_macro"))
    errs = ", ".join(f"M={s['M']}: {s['error']:.2e}" for s in rep.sizes)
    verdict(9, rep.passed and rep.fit["slope"] <= -1.4,
            f"slope in M {rep.fit['slope']:.2f} (<= -1.4); {errs}")


@pytest.fixture(scope="module")
def micro_report():
    return run_micro_to_meso(default_config("micro_to_meso"))


def test_10_micro_to_meso_bound(verdict, micro_report):
    rep = micro_report
    env_ok = all(s["sup_abar_inv"] <= s["envelope"] for s in rep.sizes)
    detail = "; ".join(f"K={s['K']}: {s['sup_abar_inv']:.2e} <= {s['envelope']:.2e}" for s in rep.sizes)
    verdict(10, rep.fit["slope"] <= -0.6 and env_ok,
            f"slope in K {rep.fit['slope']:.2f} (<= -0.6); {detail}")


def test_11_full_limit(verdict):
    rep = run_full_limit(default_config("full_limit"))
    errs = [s["error"] for s in rep.sizes]
    dec = all(b < a for a, b in zip(errs, errs[1:]))
    verdict(11, dec and rep.fit["slope"] <= -0.4,
            f"slope in N {rep.fit['slope']:.2f} (<= -0.4), strictly decreasing {dec}; "
            + ", ".join(f"N={s['N']}: {s['error']:.2e}" for s in rep.sizes))


def test_12_determinism(verdict, tmp_path):
    small = {"kind": "micro_to_meso", "ladder": [[32, 4], [64, 4], [128, 4]], "T": 0.005, "R": 256}
    same = True
    for make in (lambda: default_config("meso_to_macro"), lambda: ExperimentConfig.from_dict(small)):
        blobs = []
        for k in range(2):
            cfg = make()
            rep = run_meso_to_macro(cfg) if cfg.kind == "meso_to_macro" else run_micro_to_meso(cfg)
            out = tmp_path / f"{cfg.kind}_{k}"
            write_outputs(rep, out)
            blobs.append(tuple((out / f).read_bytes() for f in ("report.json", "errors.csv", "constants.csv")))
        same &= blobs[0] == blobs[1]
        json.loads(blobs[0][0])
    verdict(12, same, f"report.json, errors.csv and constants.csv bit-identical across reruns: {same}")
