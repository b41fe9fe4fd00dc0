"""Spline ODE against the macroscopic heat equation along K = M^2 (about 10 s)."""

from pathlib import Path

from kawasaki_twoscale.harness import ExperimentConfig, run_experiment, write_outputs

cfg = ExperimentConfig.from_json(Path(__file__).with_name("configs") / "meso_to_macro.json")
report, _ = run_experiment(cfg)
for s in report.sizes:
    print(f"N={s['N']:4d} M={s['M']}  sup_t |zeta - eta|^2_H-1 = {s['error']:.3e}")
print(f"fitted slope in M: {report.fit['slope']:.2f}, passed: {report.passed}")
write_outputs(report, cfg.outdir)
